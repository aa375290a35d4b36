//! Fixed-width query featurization: join bits over canonical join patterns
//! followed by one normalized `[l, u)` interval per attribute.

use std::sync::Arc;

use crate::relstore::{
    AttrRef, AttributeDef, FilterPredicate, JoinPattern, JoinPredicate, Schema, SubQuery,
};
use crate::relstore::CmpOp;

#[derive(Debug, thiserror::Error)]
pub enum FeatError {
    #[error("join {0} is not one of the schema's join patterns")]
    UnknownJoinPattern(String),
    #[error(transparent)]
    Query(#[from] crate::relstore::StoreError),
}

/// How the join part of a query vector is encoded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum JoinFeatVariant {
    /// `2m` bits per pattern: the binary codes of both attributes.
    Full,
    /// One presence bit per pattern.
    Simple,
}

impl JoinFeatVariant {
    pub fn name(self) -> &'static str {
        match self {
            JoinFeatVariant::Full => "full",
            JoinFeatVariant::Simple => "simple",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(JoinFeatVariant::Full),
            "simple" => Some(JoinFeatVariant::Simple),
            _ => None,
        }
    }
}

fn ceil_log2(n: usize) -> usize {
    (usize::BITS - (n - 1).leading_zeros()) as usize
}

/// Binary attribute codes: relation id in the high `m1` bits, attribute id
/// in the low `m2` bits, both 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttrCodes {
    pub m1: usize,
    pub m2: usize,
}

impl AttrCodes {
    pub fn for_schema(schema: &Schema) -> Self {
        Self {
            m1: ceil_log2(schema.num_relations() + 1),
            m2: ceil_log2(schema.max_attrs() + 1),
        }
    }

    pub fn width(&self) -> usize {
        self.m1 + self.m2
    }

    pub fn code(&self, a: AttrRef) -> u64 {
        (((a.rel + 1) as u64) << self.m2) | (a.attr + 1) as u64
    }

    /// Code bits, most significant first.
    pub fn bits(&self, a: AttrRef) -> Vec<u8> {
        let c = self.code(a);
        (0..self.width())
            .rev()
            .map(|i| ((c >> i) & 1) as u8)
            .collect()
    }
}

fn find(parent: &mut [usize], x: usize) -> usize {
    let mut r = x;
    while parent[r] != r {
        r = parent[r];
    }
    let mut y = x;
    while parent[y] != r {
        let n = parent[y];
        parent[y] = r;
        y = n;
    }
    r
}

/// Rewrites a join set into, per equivalence class of joined attributes,
/// the chain of equalities between consecutive attributes in code order.
pub fn canonicalize_joins(joins: &[JoinPredicate]) -> Vec<JoinPredicate> {
    let mut attrs: Vec<AttrRef> = joins.iter().flat_map(|j| [j.left, j.right]).collect();
    attrs.sort();
    attrs.dedup();
    let idx = |a: AttrRef| attrs.binary_search(&a).unwrap();
    let mut parent: Vec<usize> = (0..attrs.len()).collect();
    for j in joins {
        let (a, b) = (find(&mut parent, idx(j.left)), find(&mut parent, idx(j.right)));
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    let mut out = Vec::new();
    // attrs is sorted, so walking it keeps each class in code order.
    let mut last: Vec<Option<AttrRef>> = vec![None; attrs.len()];
    for (i, a) in attrs.iter().enumerate() {
        let root = find(&mut parent, i);
        if let Some(prev) = last[root] {
            out.push(JoinPattern::new(prev, *a));
        }
        last[root] = Some(*a);
    }
    out.sort();
    out
}

/// The fixed universe of canonical join patterns a schema can produce.
#[derive(Clone, Debug, PartialEq)]
pub struct JoinPatternTable {
    patterns: Vec<JoinPattern>,
}

impl JoinPatternTable {
    /// Every pattern that canonicalizing some subset of the declared join
    /// graph can yield: consecutive pairs of each connected attribute set.
    pub fn from_schema(schema: &Schema) -> Self {
        let mut attrs: Vec<AttrRef> = schema
            .joins()
            .iter()
            .flat_map(|j| [j.left, j.right])
            .collect();
        attrs.sort();
        attrs.dedup();
        let idx = |a: AttrRef| attrs.binary_search(&a).unwrap();
        let mut parent: Vec<usize> = (0..attrs.len()).collect();
        for j in schema.joins() {
            let (a, b) = (find(&mut parent, idx(j.left)), find(&mut parent, idx(j.right)));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
        let mut patterns = Vec::new();
        for root in 0..attrs.len() {
            let comp: Vec<usize> = (0..attrs.len())
                .filter(|&i| find(&mut parent, i) == root)
                .collect();
            if comp.len() < 2 {
                continue;
            }
            if comp.len() > 16 {
                for (x, &i) in comp.iter().enumerate() {
                    for &k in &comp[x + 1..] {
                        patterns.push(JoinPattern::new(attrs[i], attrs[k]));
                    }
                }
                continue;
            }
            let adjacent = |i: usize, k: usize| {
                schema
                    .joins()
                    .iter()
                    .any(|j| *j == JoinPattern::new(attrs[i], attrs[k]))
            };
            for mask in 1u32..(1 << comp.len()) {
                let members: Vec<usize> = (0..comp.len())
                    .filter(|b| mask & (1 << b) != 0)
                    .map(|b| comp[b])
                    .collect();
                if members.len() < 2 {
                    continue;
                }
                // Connectivity of the induced attribute subgraph.
                let mut seen = vec![members[0]];
                let mut stack = vec![members[0]];
                while let Some(x) = stack.pop() {
                    for &y in &members {
                        if !seen.contains(&y) && adjacent(x, y) {
                            seen.push(y);
                            stack.push(y);
                        }
                    }
                }
                if seen.len() != members.len() {
                    continue;
                }
                for w in members.windows(2) {
                    patterns.push(JoinPattern::new(attrs[w[0]], attrs[w[1]]));
                }
            }
        }
        patterns.sort();
        patterns.dedup();
        Self { patterns }
    }

    pub fn patterns(&self) -> &[JoinPattern] {
        &self.patterns
    }

    /// `Δ`, the number of patterns.
    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn index_of(&self, p: &JoinPattern) -> Option<usize> {
        self.patterns.binary_search(p).ok()
    }
}

/// Half-open interval `[lb, ub)` in raw units admitted by the conjunction of
/// `preds` (all on attribute `def`), starting from the attribute's hull.
///
/// Strict and point predicates are closed with the attribute's predicate
/// step: one unit for integral attributes, a tiny fraction of the domain
/// width for reals.
pub fn filter_interval<'a>(
    def: &AttributeDef,
    preds: impl IntoIterator<Item = &'a FilterPredicate>,
) -> (f64, f64) {
    let (mut lb, mut ub) = def.hull();
    let eps = def.predicate_step();
    let integral = def.kind.is_integral();
    for p in preds {
        let x = p.value;
        let (lo, hi) = match p.op {
            CmpOp::Ge => (if integral { x.ceil() } else { x }, f64::INFINITY),
            CmpOp::Gt => (if integral { x.floor() + 1.0 } else { x + eps }, f64::INFINITY),
            CmpOp::Lt => (f64::NEG_INFINITY, if integral { x.ceil() } else { x }),
            CmpOp::Le => (f64::NEG_INFINITY, if integral { x.floor() + 1.0 } else { x + eps }),
            CmpOp::Eq => {
                if integral && x.fract() != 0.0 {
                    // No integer equals x.
                    (x.ceil(), x.ceil())
                } else {
                    (x, x + eps)
                }
            }
        };
        lb = lb.max(lo);
        ub = ub.min(hi);
    }
    (lb, ub)
}

/// Maps a normalized pair back to a raw interval (rounding to whole units
/// for integral attributes).
pub fn decode_interval(def: &AttributeDef, lo: f64, hi: f64) -> (f64, f64) {
    let (l, u) = def.hull();
    let (a, b) = (l + lo * (u - l), l + hi * (u - l));
    if def.kind.is_integral() {
        (a.round(), b.round())
    } else {
        (a, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryFeat {
    pub join_vec: Vec<f64>,
    pub filter_vec: Vec<f64>,
    /// Some attribute's interval is empty, so the query cardinality is 0.
    pub empty_range: bool,
}

impl QueryFeat {
    pub fn full(&self) -> Vec<f64> {
        let mut v = self.join_vec.clone();
        v.extend_from_slice(&self.filter_vec);
        v
    }
}

#[derive(Clone, Debug)]
pub struct Featurizer {
    schema: Arc<Schema>,
    codes: AttrCodes,
    table: JoinPatternTable,
    variant: JoinFeatVariant,
}

impl Featurizer {
    pub fn new(schema: Arc<Schema>, variant: JoinFeatVariant) -> Self {
        Self {
            codes: AttrCodes::for_schema(&schema),
            table: JoinPatternTable::from_schema(&schema),
            schema,
            variant,
        }
    }

    pub fn schema(&self) -> &Arc<Schema> {
        &self.schema
    }

    pub fn codes(&self) -> AttrCodes {
        self.codes
    }

    pub fn table(&self) -> &JoinPatternTable {
        &self.table
    }

    pub fn variant(&self) -> JoinFeatVariant {
        self.variant
    }

    fn pattern_width(&self) -> usize {
        match self.variant {
            JoinFeatVariant::Full => 2 * self.codes.width(),
            JoinFeatVariant::Simple => 1,
        }
    }

    pub fn join_len(&self) -> usize {
        self.pattern_width() * self.table.len()
    }

    /// `d_q`.
    pub fn dim(&self) -> usize {
        self.join_len() + 2 * self.schema.num_attrs()
    }

    /// Encodes an already canonical join set.
    pub fn featurize_joins(&self, canonical: &[JoinPredicate]) -> Result<Vec<f64>, FeatError> {
        let w = self.pattern_width();
        let mut v = vec![0.0; self.join_len()];
        for p in canonical {
            let i = self
                .table
                .index_of(p)
                .ok_or_else(|| FeatError::UnknownJoinPattern(format!(
                    "{} = {}",
                    self.schema.attr_name(p.left),
                    self.schema.attr_name(p.right)
                )))?;
            let slot = &mut v[i * w..(i + 1) * w];
            match self.variant {
                JoinFeatVariant::Simple => slot[0] = 1.0,
                JoinFeatVariant::Full => {
                    let bits = self.codes.bits(p.left).into_iter().chain(self.codes.bits(p.right));
                    for (s, b) in slot.iter_mut().zip(bits) {
                        *s = b as f64;
                    }
                }
            }
        }
        Ok(v)
    }

    /// `(filter_vec, empty_range)`.
    pub fn featurize_filters(&self, filters: &[FilterPredicate]) -> (Vec<f64>, bool) {
        let mut v = Vec::with_capacity(2 * self.schema.num_attrs());
        let mut empty = false;
        for a in self.schema.attr_refs() {
            let def = self.schema.attr(a);
            let mut preds = filters.iter().filter(|f| f.attr == a).peekable();
            if preds.peek().is_none() {
                v.extend([0.0, 1.0]);
                continue;
            }
            let (lb, ub) = filter_interval(def, preds);
            let (l, u) = def.hull();
            let lo = ((lb - l) / (u - l)).clamp(0.0, 1.0);
            let hi = ((ub - l) / (u - l)).clamp(0.0, 1.0);
            if lb >= ub || hi <= lo {
                empty = true;
                v.extend([lo, lo]);
            } else {
                v.extend([lo, hi]);
            }
        }
        (v, empty)
    }

    pub fn featurize(&self, q: &SubQuery) -> Result<QueryFeat, FeatError> {
        let join_vec = self.featurize_joins(&canonicalize_joins(&q.joins))?;
        let (filter_vec, empty_range) = self.featurize_filters(&q.filters);
        Ok(QueryFeat {
            join_vec,
            filter_vec,
            empty_range,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relstore::{AttrKind, RelationDef};

    fn a(r: usize, k: usize) -> AttrRef {
        AttrRef::new(r - 1, k - 1)
    }

    fn jp(x: AttrRef, y: AttrRef) -> JoinPattern {
        JoinPattern::new(x, y)
    }

    #[test]
    fn single_predicate_is_its_own_canonical_form() {
        let j = vec![jp(a(2, 1), a(1, 1))];
        assert_eq!(canonicalize_joins(&j), vec![jp(a(1, 1), a(2, 1))]);
    }

    #[test]
    fn four_attribute_chain_canonicalises_to_sorted_chain() {
        let (w, x, y, z) = (a(1, 1), a(2, 1), a(3, 1), a(3, 2));
        // A = D, D = B, B = C over sorted codes A < B < C < D.
        let j = vec![jp(w, z), jp(z, x), jp(x, y)];
        assert_eq!(canonicalize_joins(&j), vec![jp(w, x), jp(x, y), jp(y, z)]);
        let twice = canonicalize_joins(&canonicalize_joins(&j));
        assert_eq!(twice, canonicalize_joins(&j));
    }

    #[test]
    fn ceil_log2_matches_definition() {
        assert_eq!(ceil_log2(2), 1);
        assert_eq!(ceil_log2(4), 2);
        assert_eq!(ceil_log2(5), 3);
        assert_eq!(ceil_log2(8), 3);
        assert_eq!(ceil_log2(9), 4);
    }

    #[test]
    fn integer_point_predicate_covers_one_unit() {
        let def = AttributeDef::new("a", AttrKind::Integer, 0.0, 9.0);
        let f = FilterPredicate::new(AttrRef::new(0, 0), CmpOp::Eq, 7.0);
        assert_eq!(filter_interval(&def, [&f]), (7.0, 8.0));
        let schema = Arc::new(
            Schema::new(
                vec![RelationDef {
                    name: "r".into(),
                    attributes: vec![def],
                }],
                vec![],
            )
            .unwrap(),
        );
        let fz = Featurizer::new(schema, JoinFeatVariant::Full);
        let (v, empty) = fz.featurize_filters(&[f]);
        assert!(!empty);
        assert!((v[0] - 0.7).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert_eq!(fz.featurize_filters(&[]).0, vec![0.0, 1.0]);
    }

    #[test]
    fn contradictory_filters_flag_an_empty_range() {
        let def = AttributeDef::new("a", AttrKind::Integer, 0.0, 9.0);
        let schema = Arc::new(
            Schema::new(
                vec![RelationDef {
                    name: "r".into(),
                    attributes: vec![def],
                }],
                vec![],
            )
            .unwrap(),
        );
        let fz = Featurizer::new(schema, JoinFeatVariant::Full);
        let r = AttrRef::new(0, 0);
        let (v, empty) = fz.featurize_filters(&[
            FilterPredicate::new(r, CmpOp::Gt, 6.0),
            FilterPredicate::new(r, CmpOp::Lt, 3.0),
        ]);
        assert!(empty);
        assert!(v[0] <= v[1]);
    }
}
