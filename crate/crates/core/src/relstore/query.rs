//! Select-project-join counting queries, their connected sub-queries, and
//! the restricted `SELECT COUNT(*)` text form.

use std::fmt;

use super::schema::{AttrKind, AttrRef, JoinPattern, Schema};
use super::StoreError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CmpOp {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Eq => "=",
        }
    }

    pub fn holds(self, v: f64, c: f64) -> bool {
        match self {
            CmpOp::Lt => v < c,
            CmpOp::Le => v <= c,
            CmpOp::Gt => v > c,
            CmpOp::Ge => v >= c,
            CmpOp::Eq => v == c,
        }
    }

    /// The operator obtained by swapping the operands.
    fn mirrored(self) -> CmpOp {
        match self {
            CmpOp::Lt => CmpOp::Gt,
            CmpOp::Le => CmpOp::Ge,
            CmpOp::Gt => CmpOp::Lt,
            CmpOp::Ge => CmpOp::Le,
            CmpOp::Eq => CmpOp::Eq,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterPredicate {
    pub attr: AttrRef,
    pub op: CmpOp,
    pub value: f64,
}

impl FilterPredicate {
    pub fn new(attr: AttrRef, op: CmpOp, value: f64) -> Self {
        Self { attr, op, value }
    }

    pub fn matches(&self, row: &[f64]) -> bool {
        self.op.holds(row[self.attr.attr], self.value)
    }
}

/// Equality join between attributes of two different relations.
pub type JoinPredicate = JoinPattern;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SubQueryKind {
    Single,
    Join,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubQuery {
    /// Schema relation indices, ascending and distinct.
    pub relations: Vec<usize>,
    pub joins: Vec<JoinPredicate>,
    pub filters: Vec<FilterPredicate>,
}

impl SubQuery {
    pub fn new(
        mut relations: Vec<usize>,
        joins: Vec<JoinPredicate>,
        filters: Vec<FilterPredicate>,
    ) -> Self {
        relations.sort_unstable();
        relations.dedup();
        let joins = joins
            .into_iter()
            .map(|j| JoinPattern::new(j.left, j.right))
            .collect();
        Self {
            relations,
            joins,
            filters,
        }
    }

    pub fn single(rel: usize, filters: Vec<FilterPredicate>) -> Self {
        Self::new(vec![rel], Vec::new(), filters)
    }

    pub fn kind(&self) -> SubQueryKind {
        if self.relations.len() == 1 {
            SubQueryKind::Single
        } else {
            SubQueryKind::Join
        }
    }

    /// Bit `r` set for every schema relation `r` in the query.
    pub fn relation_mask(&self) -> u64 {
        self.relations.iter().fold(0, |m, r| m | (1u64 << r))
    }

    /// True if the join predicates link every relation into one component.
    pub fn is_connected(&self) -> bool {
        connected(&self.relations, &self.joins)
    }

    pub fn validate(&self, schema: &Schema) -> Result<(), StoreError> {
        let malformed = |m: String| Err(StoreError::MalformedQuery(m));
        if self.relations.is_empty() {
            return malformed("query references no relation".into());
        }
        if self.relations.len() > 64 {
            return malformed("at most 64 relations per query".into());
        }
        for &r in &self.relations {
            if r >= schema.num_relations() {
                return Err(StoreError::UnknownRelation(format!("#{r}")));
            }
        }
        let known = |a: AttrRef| {
            self.relations.contains(&a.rel) && a.attr < schema.relation(a.rel).attributes.len()
        };
        for j in &self.joins {
            if !known(j.left) || !known(j.right) {
                return malformed(format!("join {j:?} references a relation outside the query"));
            }
            if j.left.rel == j.right.rel {
                return malformed("join within a single relation".into());
            }
        }
        for f in &self.filters {
            if !known(f.attr) {
                return malformed(format!(
                    "filter on {:?} references a relation outside the query",
                    f.attr
                ));
            }
            let def = schema.attr(f.attr);
            let (l, u) = def.hull();
            if !(f.value.is_finite() && f.value >= l && f.value < u) {
                return malformed(format!(
                    "constant {} outside the domain of {}",
                    f.value,
                    schema.attr_name(f.attr)
                ));
            }
        }
        if !self.is_connected() {
            return malformed("join graph does not connect all relations".into());
        }
        Ok(())
    }

    /// The query restricted to `relations`: induced joins and filters.
    pub fn induced(&self, relations: &[usize]) -> SubQuery {
        let inside = |r: usize| relations.contains(&r);
        SubQuery::new(
            relations.to_vec(),
            self.joins
                .iter()
                .filter(|j| inside(j.left.rel) && inside(j.right.rel))
                .copied()
                .collect(),
            self.filters
                .iter()
                .filter(|f| inside(f.attr.rel))
                .copied()
                .collect(),
        )
    }

    pub fn to_sql(&self, schema: &Schema) -> String {
        let mut out = String::from("SELECT COUNT(*) FROM ");
        let names: Vec<&str> = self
            .relations
            .iter()
            .map(|&r| schema.relation(r).name.as_str())
            .collect();
        out.push_str(&names.join(", "));
        let mut preds: Vec<String> = self
            .joins
            .iter()
            .map(|j| format!("{} = {}", schema.attr_name(j.left), schema.attr_name(j.right)))
            .collect();
        preds.extend(self.filters.iter().map(|f| {
            format!("{} {} {}", schema.attr_name(f.attr), f.op.symbol(), f.value)
        }));
        if !preds.is_empty() {
            out.push_str(" WHERE ");
            out.push_str(&preds.join(" AND "));
        }
        out.push(';');
        out
    }
}

fn connected(relations: &[usize], joins: &[JoinPredicate]) -> bool {
    let Some(&first) = relations.first() else {
        return false;
    };
    let mut reached = vec![first];
    let mut frontier = vec![first];
    while let Some(r) = frontier.pop() {
        for j in joins {
            let other = if j.left.rel == r {
                j.right.rel
            } else if j.right.rel == r {
                j.left.rel
            } else {
                continue;
            };
            if relations.contains(&other) && !reached.contains(&other) {
                reached.push(other);
                frontier.push(other);
            }
        }
    }
    reached.len() == relations.len()
}

/// Every connected non-empty relation subset of `q` with its induced
/// predicates, ordered by relation bitmask. Includes `q` itself.
pub fn enumerate_sub_queries(q: &SubQuery) -> Vec<SubQuery> {
    let k = q.relations.len();
    assert!(k <= 20, "sub-query enumeration is exponential in the relation count");
    let mut out = Vec::new();
    // Relations are ascending, so the local mask order is the schema mask order.
    for mask in 1u64..(1u64 << k) {
        let subset: Vec<usize> = (0..k)
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| q.relations[i])
            .collect();
        let sub = q.induced(&subset);
        if sub.is_connected() {
            out.push(sub);
        }
    }
    out
}

impl fmt::Display for SubQueryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SubQueryKind::Single => "single",
            SubQueryKind::Join => "join",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Token {
    Ident(String),
    Number(f64),
    Str(String),
    Sym(&'static str),
}

fn tokenize(sql: &str) -> Result<Vec<Token>, StoreError> {
    let bad = |m: String| StoreError::Sql(m);
    let chars: Vec<char> = sql.chars().collect();
    let mut i = 0;
    let mut out = Vec::new();
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len()
                && (chars[i].is_ascii_alphanumeric() || chars[i] == '_' || chars[i] == '.')
            {
                i += 1;
            }
            out.push(Token::Ident(chars[start..i].iter().collect()));
        } else if c.is_ascii_digit() || ((c == '-' || c == '+' || c == '.') && i + 1 < chars.len()) {
            let start = i;
            i += 1;
            while i < chars.len()
                && (chars[i].is_ascii_digit()
                    || chars[i] == '.'
                    || chars[i] == 'e'
                    || chars[i] == 'E'
                    || ((chars[i] == '-' || chars[i] == '+')
                        && matches!(chars[i - 1], 'e' | 'E')))
            {
                i += 1;
            }
            let text: String = chars[start..i].iter().collect();
            let v = text
                .parse::<f64>()
                .map_err(|_| bad(format!("bad number {text:?}")))?;
            out.push(Token::Number(v));
        } else if c == '\'' {
            let start = i + 1;
            i += 1;
            while i < chars.len() && chars[i] != '\'' {
                i += 1;
            }
            if i == chars.len() {
                return Err(bad("unterminated string literal".into()));
            }
            out.push(Token::Str(chars[start..i].iter().collect()));
            i += 1;
        } else {
            let two: String = chars[i..(i + 2).min(chars.len())].iter().collect();
            let sym = match two.as_str() {
                "<=" => Some("<="),
                ">=" => Some(">="),
                _ => None,
            };
            if let Some(s) = sym {
                out.push(Token::Sym(s));
                i += 2;
                continue;
            }
            let s = match c {
                '<' => "<",
                '>' => ">",
                '=' => "=",
                ',' => ",",
                '(' => "(",
                ')' => ")",
                '*' => "*",
                ';' => ";",
                _ => return Err(bad(format!("unexpected character {c:?}"))),
            };
            out.push(Token::Sym(s));
            i += 1;
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<Token>,
    pos: usize,
    schema: &'a Schema,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn keyword(&mut self, kw: &str) -> Result<(), StoreError> {
        match self.next() {
            Some(Token::Ident(s)) if s.eq_ignore_ascii_case(kw) => Ok(()),
            other => Err(StoreError::Sql(format!("expected {kw}, found {other:?}"))),
        }
    }

    fn sym(&mut self, s: &str) -> Result<(), StoreError> {
        match self.next() {
            Some(Token::Sym(t)) if t == s => Ok(()),
            other => Err(StoreError::Sql(format!("expected {s:?}, found {other:?}"))),
        }
    }

    fn operand(&mut self) -> Result<Operand, StoreError> {
        match self.next() {
            Some(Token::Ident(s)) if s.contains('.') => Ok(Operand::Attr(self.schema.resolve(&s)?)),
            Some(Token::Number(v)) => Ok(Operand::Value(v)),
            Some(Token::Str(s)) => Ok(Operand::Label(s)),
            other => Err(StoreError::Sql(format!("expected operand, found {other:?}"))),
        }
    }

    fn op(&mut self) -> Result<CmpOp, StoreError> {
        match self.next() {
            Some(Token::Sym("<")) => Ok(CmpOp::Lt),
            Some(Token::Sym("<=")) => Ok(CmpOp::Le),
            Some(Token::Sym(">")) => Ok(CmpOp::Gt),
            Some(Token::Sym(">=")) => Ok(CmpOp::Ge),
            Some(Token::Sym("=")) => Ok(CmpOp::Eq),
            other => Err(StoreError::Sql(format!("expected comparison, found {other:?}"))),
        }
    }
}

enum Operand {
    Attr(AttrRef),
    Value(f64),
    Label(String),
}

/// Parses `SELECT COUNT(*) FROM r1, r2 WHERE r1.a = r2.b AND r1.x >= 3;`.
///
/// Only conjunctions of attribute equalities and attribute/constant
/// comparisons are accepted; categorical constants may be quoted labels.
pub fn parse_sql(schema: &Schema, sql: &str) -> Result<SubQuery, StoreError> {
    let mut p = Parser {
        tokens: tokenize(sql)?,
        pos: 0,
        schema,
    };
    p.keyword("SELECT")?;
    p.keyword("COUNT")?;
    p.sym("(")?;
    p.sym("*")?;
    p.sym(")")?;
    p.keyword("FROM")?;
    let mut relations = Vec::new();
    loop {
        match p.next() {
            Some(Token::Ident(name)) => {
                let r = schema
                    .relation_index(&name)
                    .ok_or(StoreError::UnknownRelation(name))?;
                relations.push(r);
            }
            other => return Err(StoreError::Sql(format!("expected relation, found {other:?}"))),
        }
        if p.peek() == Some(&Token::Sym(",")) {
            p.pos += 1;
        } else {
            break;
        }
    }
    let mut joins = Vec::new();
    let mut filters = Vec::new();
    if matches!(p.peek(), Some(Token::Ident(s)) if s.eq_ignore_ascii_case("WHERE")) {
        p.pos += 1;
        loop {
            let lhs = p.operand()?;
            let op = p.op()?;
            let rhs = p.operand()?;
            let label = |a: AttrRef, s: &str| {
                let def = schema.attr(a);
                if def.kind != AttrKind::Categorical {
                    return Err(StoreError::Sql(format!("string constant for {}", def.name)));
                }
                def.category_code(s)
                    .ok_or_else(|| StoreError::Sql(format!("unknown category {s:?}")))
            };
            match (lhs, rhs) {
                (Operand::Attr(a), Operand::Attr(b)) => {
                    if op != CmpOp::Eq {
                        return Err(StoreError::Sql("only equality joins are supported".into()));
                    }
                    joins.push(JoinPattern::new(a, b));
                }
                (Operand::Attr(a), Operand::Value(v)) => filters.push(FilterPredicate::new(a, op, v)),
                (Operand::Value(v), Operand::Attr(a)) => {
                    filters.push(FilterPredicate::new(a, op.mirrored(), v))
                }
                (Operand::Attr(a), Operand::Label(s)) => {
                    filters.push(FilterPredicate::new(a, op, label(a, &s)?))
                }
                (Operand::Label(s), Operand::Attr(a)) => {
                    filters.push(FilterPredicate::new(a, op.mirrored(), label(a, &s)?))
                }
                _ => return Err(StoreError::Sql("predicate without an attribute".into())),
            }
            match p.peek() {
                Some(Token::Ident(s)) if s.eq_ignore_ascii_case("AND") => p.pos += 1,
                _ => break,
            }
        }
    }
    if p.peek() == Some(&Token::Sym(";")) {
        p.pos += 1;
    }
    if let Some(t) = p.peek() {
        return Err(StoreError::Sql(format!("trailing input at {t:?}")));
    }
    let q = SubQuery::new(relations, joins, filters);
    q.validate(schema)?;
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relstore::schema::{AttributeDef, RelationDef};

    fn rel(name: &str) -> RelationDef {
        RelationDef {
            name: name.into(),
            attributes: vec![
                AttributeDef::new("a", AttrKind::Integer, 0.0, 9.0),
                AttributeDef::new("x", AttrKind::Real, 0.0, 1.0),
            ],
        }
    }

    fn j(r1: usize, r2: usize) -> JoinPattern {
        JoinPattern::new(AttrRef::new(r1, 0), AttrRef::new(r2, 0))
    }

    fn schema(joins: Vec<JoinPattern>) -> Schema {
        Schema::new(vec![rel("r"), rel("s"), rel("t")], joins).unwrap()
    }

    #[test]
    fn single_relation_enumerates_itself() {
        let q = SubQuery::single(1, vec![]);
        let subs = enumerate_sub_queries(&q);
        assert_eq!(subs, vec![q]);
        assert_eq!(subs[0].kind(), SubQueryKind::Single);
    }

    #[test]
    fn chain_has_six_connected_subsets() {
        let q = SubQuery::new(vec![0, 1, 2], vec![j(0, 1), j(1, 2)], vec![]);
        let subs = enumerate_sub_queries(&q);
        let sets: Vec<Vec<usize>> = subs.iter().map(|s| s.relations.clone()).collect();
        assert_eq!(
            sets,
            vec![vec![0], vec![1], vec![0, 1], vec![2], vec![1, 2], vec![0, 1, 2]]
        );
        let kinds: Vec<SubQueryKind> = subs.iter().map(|s| s.kind()).collect();
        assert_eq!(kinds.iter().filter(|k| **k == SubQueryKind::Single).count(), 3);
    }

    #[test]
    fn triangle_has_seven_connected_subsets() {
        let q = SubQuery::new(vec![0, 1, 2], vec![j(0, 1), j(1, 2), j(0, 2)], vec![]);
        assert_eq!(enumerate_sub_queries(&q).len(), 7);
    }

    #[test]
    fn sql_round_trip() {
        let s = schema(vec![j(0, 1)]);
        let q = SubQuery::new(
            vec![0, 1],
            vec![j(0, 1)],
            vec![
                FilterPredicate::new(AttrRef::new(0, 1), CmpOp::Ge, 0.25),
                FilterPredicate::new(AttrRef::new(1, 0), CmpOp::Lt, 7.0),
            ],
        );
        let sql = q.to_sql(&s);
        assert_eq!(
            sql,
            "SELECT COUNT(*) FROM r, s WHERE r.a = s.a AND r.x >= 0.25 AND s.a < 7;"
        );
        assert_eq!(parse_sql(&s, &sql).unwrap(), q);
    }

    #[test]
    fn parser_mirrors_constant_on_left_and_rejects_garbage() {
        let s = schema(vec![]);
        let q = parse_sql(&s, "select count(*) from r where 3 < r.a").unwrap();
        assert_eq!(q.filters[0].op, CmpOp::Gt);
        assert!(parse_sql(&s, "SELECT COUNT(*) FROM r WHERE r.a < s.a").is_err());
        assert!(parse_sql(&s, "SELECT COUNT(*) FROM r, s").is_err());
        assert!(parse_sql(&s, "SELECT * FROM r").is_err());
        assert!(parse_sql(&s, "SELECT COUNT(*) FROM r WHERE r.a >= 11").is_err());
    }
}
