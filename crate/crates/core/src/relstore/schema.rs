//! Static relational schema: relations, typed attributes, declared joins.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::Deserialize;

use super::StoreError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttrKind {
    /// Labels mapped one-to-one onto `1..=n`.
    Categorical,
    /// Numerical attribute restricted to integer values.
    Integer,
    /// Numerical attribute over the reals.
    Real,
}

impl AttrKind {
    pub fn is_integral(self) -> bool {
        !matches!(self, AttrKind::Real)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeDef {
    pub name: String,
    pub kind: AttrKind,
    /// Smallest admissible value.
    pub low: f64,
    /// Largest admissible value (inclusive).
    pub high: f64,
    /// Category labels; label `i` is stored as `i + 1`.
    pub categories: Vec<String>,
}

impl AttributeDef {
    pub fn new(name: impl Into<String>, kind: AttrKind, low: f64, high: f64) -> Self {
        Self {
            name: name.into(),
            kind,
            low,
            high,
            categories: Vec::new(),
        }
    }

    /// Half-open hull `[l, u)` enclosing every admissible value.
    ///
    /// Integral attributes close one unit step above the maximum; real
    /// attributes close a relative `2^-32` (plus a tiny absolute slack) above it.
    pub fn hull(&self) -> (f64, f64) {
        let upper = if self.kind.is_integral() {
            self.high + 1.0
        } else {
            self.high + self.high.abs() * 2f64.powi(-32) + 1e-12
        };
        (self.low, upper)
    }

    /// Width of the smallest representable gap used when rewriting strict or
    /// point predicates into half-open intervals.
    pub fn predicate_step(&self) -> f64 {
        if self.kind.is_integral() {
            1.0
        } else {
            let (l, u) = self.hull();
            1e-9 * (u - l)
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        v.is_finite()
            && v >= self.low
            && v <= self.high
            && (!self.kind.is_integral() || v.fract() == 0.0)
    }

    pub fn category_code(&self, label: &str) -> Option<f64> {
        self.categories
            .iter()
            .position(|c| c == label)
            .map(|i| (i + 1) as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelationDef {
    pub name: String,
    pub attributes: Vec<AttributeDef>,
}

/// Position of an attribute: relation index and attribute index within it.
///
/// The derived ordering (relation first) coincides with the ordering of the
/// binary attribute codes used for featurization, so it doubles as the global
/// attribute order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AttrRef {
    pub rel: usize,
    pub attr: usize,
}

impl AttrRef {
    pub fn new(rel: usize, attr: usize) -> Self {
        Self { rel, attr }
    }
}

/// An equality join between two attributes, stored with `left < right`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct JoinPattern {
    pub left: AttrRef,
    pub right: AttrRef,
}

impl JoinPattern {
    pub fn new(a: AttrRef, b: AttrRef) -> Self {
        if a <= b {
            Self { left: a, right: b }
        } else {
            Self { left: b, right: a }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schema {
    relations: Vec<RelationDef>,
    joins: Vec<JoinPattern>,
    offsets: Vec<usize>,
}

impl Schema {
    pub fn new(relations: Vec<RelationDef>, joins: Vec<JoinPattern>) -> Result<Self, StoreError> {
        let invalid = |m: String| Err(StoreError::InvalidSchema(m));
        if relations.is_empty() {
            return invalid("schema has no relations".into());
        }
        let mut names = HashSet::new();
        for r in &relations {
            if !names.insert(r.name.as_str()) {
                return invalid(format!("duplicate relation {}", r.name));
            }
            if r.attributes.is_empty() {
                return invalid(format!("relation {} has no attributes", r.name));
            }
            let mut attrs = HashSet::new();
            for a in &r.attributes {
                if !attrs.insert(a.name.as_str()) {
                    return invalid(format!("duplicate attribute {}.{}", r.name, a.name));
                }
                if !(a.low.is_finite() && a.high.is_finite() && a.low < a.high) {
                    return invalid(format!(
                        "attribute {}.{} needs low < high, got [{}, {}]",
                        r.name, a.name, a.low, a.high
                    ));
                }
                if a.kind.is_integral() && (a.low.fract() != 0.0 || a.high.fract() != 0.0) {
                    return invalid(format!(
                        "integral attribute {}.{} needs integer bounds",
                        r.name, a.name
                    ));
                }
                if a.kind == AttrKind::Categorical
                    && !a.categories.is_empty()
                    && (a.low != 1.0 || a.high != a.categories.len() as f64)
                {
                    return invalid(format!(
                        "categorical attribute {}.{} must span 1..={}",
                        r.name,
                        a.name,
                        a.categories.len()
                    ));
                }
            }
        }
        let mut offsets = Vec::with_capacity(relations.len());
        let mut t = 0;
        for r in &relations {
            offsets.push(t);
            t += r.attributes.len();
        }
        let mut schema = Self {
            relations,
            joins: Vec::new(),
            offsets,
        };
        let mut canonical = Vec::new();
        for j in joins {
            let j = JoinPattern::new(j.left, j.right);
            for side in [j.left, j.right] {
                if side.rel >= schema.relations.len()
                    || side.attr >= schema.relations[side.rel].attributes.len()
                {
                    return invalid(format!("join references unknown attribute {side:?}"));
                }
            }
            if j.left.rel == j.right.rel {
                return invalid("joins within one relation are not supported".into());
            }
            if schema.attr(j.left).kind != schema.attr(j.right).kind {
                return invalid(format!(
                    "join {} = {} mixes attribute kinds",
                    schema.attr_name(j.left),
                    schema.attr_name(j.right)
                ));
            }
            canonical.push(j);
        }
        canonical.sort();
        canonical.dedup();
        schema.joins = canonical;
        Ok(schema)
    }

    pub fn relations(&self) -> &[RelationDef] {
        &self.relations
    }

    pub fn relation(&self, rel: usize) -> &RelationDef {
        &self.relations[rel]
    }

    /// Declared join graph, canonical and sorted.
    pub fn joins(&self) -> &[JoinPattern] {
        &self.joins
    }

    /// `N`, the number of relations.
    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    /// `T`, the number of attributes across all relations.
    pub fn num_attrs(&self) -> usize {
        self.relations.iter().map(|r| r.attributes.len()).sum()
    }

    /// `n_max`, the largest attribute count of any relation.
    pub fn max_attrs(&self) -> usize {
        self.relations
            .iter()
            .map(|r| r.attributes.len())
            .max()
            .unwrap_or(0)
    }

    pub fn attr(&self, a: AttrRef) -> &AttributeDef {
        &self.relations[a.rel].attributes[a.attr]
    }

    /// Position of `a` in the global attribute order.
    pub fn global_index(&self, a: AttrRef) -> usize {
        self.offsets[a.rel] + a.attr
    }

    /// Every attribute in global order.
    pub fn attr_refs(&self) -> Vec<AttrRef> {
        self.relations
            .iter()
            .enumerate()
            .flat_map(|(r, rel)| (0..rel.attributes.len()).map(move |a| AttrRef::new(r, a)))
            .collect()
    }

    pub fn relation_index(&self, name: &str) -> Option<usize> {
        self.relations.iter().position(|r| r.name == name)
    }

    pub fn attr_index(&self, rel: usize, name: &str) -> Option<usize> {
        self.relations[rel].attributes.iter().position(|a| a.name == name)
    }

    /// Resolves `relation.attribute`.
    pub fn resolve(&self, qualified: &str) -> Result<AttrRef, StoreError> {
        let (r, a) = qualified
            .split_once('.')
            .ok_or_else(|| StoreError::UnknownAttribute(qualified.to_string()))?;
        let rel = self
            .relation_index(r.trim())
            .ok_or_else(|| StoreError::UnknownRelation(r.trim().to_string()))?;
        let attr = self
            .attr_index(rel, a.trim())
            .ok_or_else(|| StoreError::UnknownAttribute(qualified.to_string()))?;
        Ok(AttrRef::new(rel, attr))
    }

    pub fn attr_name(&self, a: AttrRef) -> String {
        format!("{}.{}", self.relations[a.rel].name, self.attr(a).name)
    }

    /// True if the declared join graph links some attribute of `a` to one of `b`.
    pub fn relations_joinable(&self, a: usize, b: usize) -> bool {
        self.joins.iter().any(|j| {
            (j.left.rel == a && j.right.rel == b) || (j.left.rel == b && j.right.rel == a)
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self, StoreError> {
        let file: SchemaFile =
            toml::from_str(text).map_err(|e| StoreError::InvalidSchema(e.to_string()))?;
        let relations: Vec<RelationDef> = file
            .relations
            .into_iter()
            .map(|r| RelationDef {
                name: r.name,
                attributes: r
                    .attributes
                    .into_iter()
                    .map(|a| {
                        let (low, high) = match (a.low, a.high, a.kind) {
                            (Some(l), Some(h), _) => (l, h),
                            (None, None, AttrKind::Categorical) if !a.categories.is_empty() => {
                                (1.0, a.categories.len() as f64)
                            }
                            _ => (f64::NAN, f64::NAN),
                        };
                        AttributeDef {
                            name: a.name,
                            kind: a.kind,
                            low,
                            high,
                            categories: a.categories,
                        }
                    })
                    .collect(),
            })
            .collect();
        // Resolve joins against a join-free schema first.
        let bare = Schema::new(relations.clone(), Vec::new())?;
        let joins = file
            .joins
            .iter()
            .map(|j| Ok(JoinPattern::new(bare.resolve(&j.left)?, bare.resolve(&j.right)?)))
            .collect::<Result<Vec<_>, StoreError>>()?;
        Schema::new(relations, joins)
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| StoreError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Serialises the schema in the same TOML layout [`Schema::from_toml_str`] reads.
    pub fn to_toml_string(&self) -> String {
        let mut out = String::new();
        for r in &self.relations {
            out.push_str(&format!("[[relations]]\nname = \"{}\"\n", r.name));
            for a in &r.attributes {
                let kind = match a.kind {
                    AttrKind::Categorical => "categorical",
                    AttrKind::Integer => "integer",
                    AttrKind::Real => "real",
                };
                out.push_str(&format!(
                    "[[relations.attributes]]\nname = \"{}\"\nkind = \"{kind}\"\nlow = {:?}\nhigh = {:?}\n",
                    a.name, a.low, a.high
                ));
                if !a.categories.is_empty() {
                    let cats: Vec<String> =
                        a.categories.iter().map(|c| format!("\"{c}\"")).collect();
                    out.push_str(&format!("categories = [{}]\n", cats.join(", ")));
                }
            }
            out.push('\n');
        }
        for j in &self.joins {
            out.push_str(&format!(
                "[[joins]]\nleft = \"{}\"\nright = \"{}\"\n",
                self.attr_name(j.left),
                self.attr_name(j.right)
            ));
        }
        out
    }
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.relations {
            let attrs: Vec<&str> = r.attributes.iter().map(|a| a.name.as_str()).collect();
            writeln!(f, "{}({})", r.name, attrs.join(", "))?;
        }
        for j in &self.joins {
            writeln!(f, "{} = {}", self.attr_name(j.left), self.attr_name(j.right))?;
        }
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemaFile {
    relations: Vec<RelationFile>,
    #[serde(default)]
    joins: Vec<JoinFile>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RelationFile {
    name: String,
    attributes: Vec<AttributeFile>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AttributeFile {
    name: String,
    kind: AttrKind,
    low: Option<f64>,
    high: Option<f64>,
    #[serde(default)]
    categories: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JoinFile {
    left: String,
    right: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = r#"
[[relations]]
name = "r"
[[relations.attributes]]
name = "a"
kind = "integer"
low = 0
high = 9
[[relations.attributes]]
name = "c"
kind = "categorical"
categories = ["x", "y", "z"]

[[relations]]
name = "s"
[[relations.attributes]]
name = "a"
kind = "integer"
low = 0
high = 9

[[joins]]
left = "s.a"
right = "r.a"
"#;

    #[test]
    fn parses_toml_and_canonicalises_joins() {
        let s = Schema::from_toml_str(TEXT).unwrap();
        assert_eq!(s.num_relations(), 2);
        assert_eq!(s.num_attrs(), 3);
        assert_eq!(s.max_attrs(), 2);
        assert_eq!(s.joins().len(), 1);
        assert_eq!(s.joins()[0].left, AttrRef::new(0, 0));
        let c = s.attr(AttrRef::new(0, 1));
        assert_eq!((c.low, c.high), (1.0, 3.0));
        assert_eq!(c.category_code("z"), Some(3.0));
        let again = Schema::from_toml_str(&s.to_toml_string()).unwrap();
        assert_eq!(again, s);
    }

    #[test]
    fn integer_hull_closes_one_step_above_max() {
        let a = AttributeDef::new("a", AttrKind::Integer, 0.0, 9.0);
        assert_eq!(a.hull(), (0.0, 10.0));
        assert_eq!(a.predicate_step(), 1.0);
        let r = AttributeDef::new("r", AttrKind::Real, 0.0, 1.0);
        let (l, u) = r.hull();
        assert_eq!(l, 0.0);
        assert!(u > 1.0 && u < 1.0 + 1e-9);
    }

    #[test]
    fn rejects_duplicate_names_and_bad_domains() {
        let a = AttributeDef::new("a", AttrKind::Integer, 0.0, 9.0);
        let rel = RelationDef {
            name: "r".into(),
            attributes: vec![a.clone(), a.clone()],
        };
        assert!(Schema::new(vec![rel], vec![]).is_err());
        let bad = RelationDef {
            name: "r".into(),
            attributes: vec![AttributeDef::new("a", AttrKind::Real, 1.0, 1.0)],
        };
        assert!(Schema::new(vec![bad], vec![]).is_err());
        let r1 = RelationDef {
            name: "r".into(),
            attributes: vec![a.clone()],
        };
        assert!(Schema::new(vec![r1.clone(), r1], vec![]).is_err());
    }

    #[test]
    fn rejects_joins_between_incompatible_kinds() {
        let r = RelationDef {
            name: "r".into(),
            attributes: vec![AttributeDef::new("a", AttrKind::Integer, 0.0, 9.0)],
        };
        let s = RelationDef {
            name: "s".into(),
            attributes: vec![AttributeDef::new("b", AttrKind::Real, 0.0, 9.0)],
        };
        let j = JoinPattern::new(AttrRef::new(0, 0), AttrRef::new(1, 0));
        assert!(Schema::new(vec![r, s], vec![j]).is_err());
    }
}
