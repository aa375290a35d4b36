//! Per-attribute histogram summaries of the database ("DB states").
//!
//! Row `k` of the state matrix is the histogram of the `k`-th attribute in
//! global order. Counts are kept exactly and maintained incrementally from
//! store deltas; the scaled view divides by a per-relation normalizer fixed
//! at build time.

use std::io::{BufRead, Write};

use alece_autodiff::Tensor;
use log::warn;

use crate::relstore::{AttrRef, Delta, RowStore, Schema};

#[derive(Debug, thiserror::Error)]
pub enum StatesError {
    #[error("attribute {0} has a degenerate domain")]
    EmptyDomain(String),
    #[error("equal-depth bins need initial data for {0}")]
    NoInitialData(String),
    #[error("bin count must be positive")]
    ZeroBins,
    #[error("negative count in bin {bin} of attribute {attr}: states out of sync with the store")]
    NegativeCount { attr: usize, bin: usize },
    #[error("states file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BinMode {
    EqualWidth,
    EqualDepth,
}

impl BinMode {
    pub fn name(self) -> &'static str {
        match self {
            BinMode::EqualWidth => "equal-width",
            BinMode::EqualDepth => "equal-depth",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "equal-width" | "equalWidth" | "width" => Some(BinMode::EqualWidth),
            "equal-depth" | "equalDepth" | "depth" => Some(BinMode::EqualDepth),
            _ => None,
        }
    }
}

/// `d_x + 1` strictly increasing edges; bin `j` is `[edges[j], edges[j+1])`.
#[derive(Clone, Debug, PartialEq)]
pub struct BinPartition {
    pub edges: Vec<f64>,
}

impl BinPartition {
    pub fn equal_width(l: f64, u: f64, bins: usize) -> Self {
        let a = (u - l) / bins as f64;
        let mut edges: Vec<f64> = (0..=bins).map(|j| l + a * j as f64).collect();
        edges[bins] = u;
        Self { edges }
    }

    /// Quantile edges over `values`, forced strictly increasing inside `[l, u]`.
    pub fn equal_depth(l: f64, u: f64, bins: usize, values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let mut edges = Vec::with_capacity(bins + 1);
        edges.push(l);
        for j in 1..bins {
            edges.push(sorted[(j * n / bins).min(n - 1)]);
        }
        edges.push(u);
        for j in 1..bins {
            if edges[j] <= edges[j - 1] {
                edges[j] = edges[j - 1].next_up();
            }
        }
        for j in (1..bins).rev() {
            if edges[j] >= edges[j + 1] {
                edges[j] = edges[j + 1].next_down();
            }
        }
        Self { edges }
    }

    pub fn bins(&self) -> usize {
        self.edges.len() - 1
    }

    /// Bin holding `v`; values outside `[l, u)` land in the nearest end bin
    /// and are reported as clamped.
    pub fn locate(&self, v: f64) -> (usize, bool) {
        let d = self.bins();
        if v < self.edges[0] || v.is_nan() {
            return (0, true);
        }
        if v >= self.edges[d] {
            return (d - 1, true);
        }
        // First edge strictly greater than v, minus one.
        (self.edges.partition_point(|e| *e <= v) - 1, false)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DbStates {
    bins: usize,
    mode: BinMode,
    partitions: Vec<BinPartition>,
    attr_rel: Vec<usize>,
    /// Global index of each relation's first attribute.
    rel_offset: Vec<usize>,
    normalizers: Vec<f64>,
    raw: Vec<u64>,
    scaled: Vec<f64>,
}

impl DbStates {
    /// Tallies every current value of `store` into freshly computed bins.
    pub fn build(store: &RowStore, bins: usize, mode: BinMode) -> Result<Self, StatesError> {
        if bins == 0 {
            return Err(StatesError::ZeroBins);
        }
        let schema = store.schema();
        let mut partitions = Vec::with_capacity(schema.num_attrs());
        let mut attr_rel = Vec::with_capacity(schema.num_attrs());
        let mut rel_offset = Vec::with_capacity(schema.num_relations());
        for (r, rel) in schema.relations().iter().enumerate() {
            rel_offset.push(attr_rel.len());
            for (a, def) in rel.attributes.iter().enumerate() {
                let (l, u) = def.hull();
                if !(l.is_finite() && u.is_finite() && l < u) {
                    return Err(StatesError::EmptyDomain(schema.attr_name(AttrRef::new(r, a))));
                }
                let p = match mode {
                    BinMode::EqualWidth => BinPartition::equal_width(l, u, bins),
                    BinMode::EqualDepth => {
                        let values: Vec<f64> = store.rows(r).map(|(_, v)| v[a]).collect();
                        if values.is_empty() {
                            return Err(StatesError::NoInitialData(
                                schema.attr_name(AttrRef::new(r, a)),
                            ));
                        }
                        BinPartition::equal_depth(l, u, bins, &values)
                    }
                };
                partitions.push(p);
                attr_rel.push(r);
            }
        }
        let normalizers = (0..schema.num_relations())
            .map(|r| (2 * store.len(r)).max(1) as f64)
            .collect();
        let mut states = Self {
            bins,
            mode,
            partitions,
            attr_rel,
            rel_offset,
            normalizers,
            raw: Vec::new(),
            scaled: Vec::new(),
        };
        states.recount(store);
        Ok(states)
    }

    /// Re-tallies `store` under this instance's frozen edges and normalizers.
    pub fn rebuild_counts(&self, store: &RowStore) -> Self {
        let mut s = self.clone();
        s.recount(store);
        s
    }

    fn recount(&mut self, store: &RowStore) {
        let t = self.attr_rel.len();
        self.raw = vec![0; t * self.bins];
        for r in 0..self.rel_offset.len() {
            let off = self.rel_offset[r];
            for (_, row) in store.rows(r) {
                for (a, &v) in row.iter().enumerate() {
                    let k = off + a;
                    let (b, clamped) = self.partitions[k].locate(v);
                    if clamped {
                        warn!("value {v} of attribute {k} outside its bins; clamped");
                    }
                    self.raw[k * self.bins + b] += 1;
                }
            }
        }
        self.scaled = (0..t * self.bins)
            .map(|i| self.raw[i] as f64 / self.normalizers[self.attr_rel[i / self.bins]])
            .collect();
    }

    pub fn num_attrs(&self) -> usize {
        self.attr_rel.len()
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn mode(&self) -> BinMode {
        self.mode
    }

    pub fn partition(&self, k: usize) -> &BinPartition {
        &self.partitions[k]
    }

    pub fn normalizers(&self) -> &[f64] {
        &self.normalizers
    }

    pub fn raw_counts(&self) -> &[u64] {
        &self.raw
    }

    pub fn raw_row(&self, k: usize) -> &[u64] {
        &self.raw[k * self.bins..(k + 1) * self.bins]
    }

    pub fn scaled(&self) -> &[f64] {
        &self.scaled
    }

    /// Scaled counts as a `T x d_x` matrix.
    pub fn matrix(&self) -> Tensor {
        Tensor::new(self.num_attrs(), self.bins, self.scaled.clone()).expect("state shape")
    }

    fn bump(&mut self, k: usize, v: f64, up: bool) -> Result<usize, StatesError> {
        let (b, clamped) = self.partitions[k].locate(v);
        if clamped {
            warn!("value {v} of attribute {k} outside its bins; clamped");
        }
        let i = k * self.bins + b;
        if up {
            self.raw[i] += 1;
        } else {
            self.raw[i] = self.raw[i]
                .checked_sub(1)
                .ok_or(StatesError::NegativeCount { attr: k, bin: b })?;
        }
        self.scaled[i] = self.raw[i] as f64 / self.normalizers[self.attr_rel[k]];
        Ok(b)
    }

    /// Applies one store delta; returns the touched `(attribute, bin)` pairs.
    pub fn update(&mut self, delta: &Delta) -> Result<Vec<(usize, usize)>, StatesError> {
        let mut touched = Vec::new();
        match delta {
            Delta::Inserted { rel, values, .. } | Delta::Deleted { rel, values, .. } => {
                let up = matches!(delta, Delta::Inserted { .. });
                let off = self.rel_offset[*rel];
                for (a, &v) in values.iter().enumerate() {
                    touched.push((off + a, self.bump(off + a, v, up)?));
                }
            }
            Delta::Updated {
                rel, attr, old, new, ..
            } => {
                let k = self.rel_offset[*rel] + attr;
                let (bo, _) = self.partitions[k].locate(*old);
                let (bn, _) = self.partitions[k].locate(*new);
                if bo != bn {
                    touched.push((k, self.bump(k, *old, false)?));
                    touched.push((k, self.bump(k, *new, true)?));
                }
            }
        }
        Ok(touched)
    }

    /// Immutable value copy.
    pub fn snapshot(&self) -> DbStates {
        self.clone()
    }

    /// True if frozen edges, normalizers and shape agree, i.e. the two
    /// instances are counts over the same layout.
    pub fn same_layout(&self, other: &DbStates) -> bool {
        self.bins == other.bins
            && self.mode == other.mode
            && self.partitions == other.partitions
            && self.normalizers == other.normalizers
            && self.attr_rel == other.attr_rel
    }

    fn with_counts(&self, raw: Vec<u64>) -> Self {
        let mut s = self.clone();
        s.scaled = (0..raw.len())
            .map(|i| raw[i] as f64 / s.normalizers[s.attr_rel[i / s.bins]])
            .collect();
        s.raw = raw;
        s
    }
}

const POOL_MAGIC: &str = "dbstates v1";

/// Writes a snapshot pool: the shared layout header once, then one block of
/// raw counts per `(id, snapshot)`. All snapshots must share the layout of
/// `layout`.
pub fn write_pool<W: Write>(
    w: &mut W,
    layout: &DbStates,
    snapshots: &[(u64, &DbStates)],
) -> Result<(), StatesError> {
    writeln!(w, "{POOL_MAGIC}")?;
    writeln!(w, "bins {}", layout.bins)?;
    writeln!(w, "mode {}", layout.mode.name())?;
    writeln!(w, "attributes {}", layout.num_attrs())?;
    let norms: Vec<String> = layout.normalizers.iter().map(|v| v.to_string()).collect();
    writeln!(w, "normalizers {}", norms.join(" "))?;
    let rels: Vec<String> = layout.attr_rel.iter().map(|v| v.to_string()).collect();
    writeln!(w, "relations {}", rels.join(" "))?;
    for p in &layout.partitions {
        let e: Vec<String> = p.edges.iter().map(|v| v.to_string()).collect();
        writeln!(w, "edges {}", e.join(" "))?;
    }
    for (id, s) in snapshots {
        if !layout.same_layout(s) {
            return Err(StatesError::Format(format!("snapshot {id} has a different layout")));
        }
        writeln!(w, "snapshot {id}")?;
        for k in 0..s.num_attrs() {
            let row: Vec<String> = s.raw_row(k).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", row.join(" "))?;
        }
    }
    Ok(())
}

/// Reads a pool written by [`write_pool`].
pub fn read_pool<R: BufRead>(r: R) -> Result<Vec<(u64, DbStates)>, StatesError> {
    let bad = |m: &str| StatesError::Format(m.to_string());
    let mut lines = r.lines();
    let mut next = || -> Result<String, StatesError> {
        lines.next().ok_or_else(|| bad("unexpected end of file"))?.map_err(StatesError::from)
    };
    if next()?.trim() != POOL_MAGIC {
        return Err(bad("missing header"));
    }
    fn field<T: std::str::FromStr>(line: &str, key: &str) -> Result<Vec<T>, StatesError> {
        let rest = line
            .strip_prefix(key)
            .ok_or_else(|| StatesError::Format(format!("expected {key}")))?;
        rest.split_whitespace()
            .map(|t| t.parse::<T>().map_err(|_| StatesError::Format(format!("bad {key} value {t:?}"))))
            .collect()
    }
    let bins = *field::<usize>(&next()?, "bins")?.first().ok_or_else(|| bad("bins"))?;
    let mode_line = next()?;
    let mode = mode_line
        .strip_prefix("mode ")
        .and_then(|m| BinMode::parse(m.trim()))
        .ok_or_else(|| bad("mode"))?;
    let t = *field::<usize>(&next()?, "attributes")?.first().ok_or_else(|| bad("attributes"))?;
    let normalizers = field::<f64>(&next()?, "normalizers")?;
    let attr_rel = field::<usize>(&next()?, "relations")?;
    if attr_rel.len() != t || attr_rel.iter().any(|r| *r >= normalizers.len()) {
        return Err(bad("relation map"));
    }
    let mut partitions = Vec::with_capacity(t);
    for _ in 0..t {
        let edges = field::<f64>(&next()?, "edges")?;
        if edges.len() != bins + 1 {
            return Err(bad("edge count"));
        }
        partitions.push(BinPartition { edges });
    }
    let mut rel_offset = Vec::new();
    for (k, r) in attr_rel.iter().enumerate() {
        if *r == rel_offset.len() {
            rel_offset.push(k);
        }
    }
    let layout = DbStates {
        bins,
        mode,
        partitions,
        attr_rel,
        rel_offset,
        normalizers,
        raw: Vec::new(),
        scaled: Vec::new(),
    };
    let mut out = Vec::new();
    loop {
        let header = match lines.next() {
            None => break,
            Some(l) => l?,
        };
        if header.trim().is_empty() {
            continue;
        }
        let id = *field::<u64>(&header, "snapshot")?.first().ok_or_else(|| bad("snapshot id"))?;
        let mut raw = Vec::with_capacity(t * bins);
        for _ in 0..t {
            let line = lines.next().ok_or_else(|| bad("truncated snapshot"))??;
            let row = field::<u64>(&line, "")?;
            if row.len() != bins {
                return Err(bad("row width"));
            }
            raw.extend(row);
        }
        out.push((id, layout.with_counts(raw)));
    }
    Ok(out)
}

/// Convenience wrapper used by tests and the CLI: attribute count check.
pub fn check_schema(states: &DbStates, schema: &Schema) -> Result<(), StatesError> {
    if states.num_attrs() != schema.num_attrs() {
        return Err(StatesError::Format(format!(
            "states cover {} attributes, schema has {}",
            states.num_attrs(),
            schema.num_attrs()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::relstore::{AttrKind, AttributeDef, DmlStatement, RelationDef};

    fn store(kind: AttrKind, high: f64, values: &[f64]) -> RowStore {
        let schema = Arc::new(
            Schema::new(
                vec![RelationDef {
                    name: "r".into(),
                    attributes: vec![AttributeDef::new("a", kind, 0.0, high)],
                }],
                vec![],
            )
            .unwrap(),
        );
        let rows: Vec<Vec<f64>> = values.iter().map(|v| vec![*v]).collect();
        RowStore::with_rows(schema, &[rows]).unwrap()
    }

    #[test]
    fn one_value_per_quarter() {
        // A real domain [0, 1] has hull [0, 1 + tiny); quarter edges sit just
        // above 0.25/0.5/0.75, which leaves these values in their quarters.
        let s = store(AttrKind::Real, 1.0, &[0.0, 0.3, 0.6, 0.9]);
        let st = DbStates::build(&s, 4, BinMode::EqualWidth).unwrap();
        assert_eq!(st.raw_counts(), &[1, 1, 1, 1]);
        assert_eq!(st.normalizers(), &[8.0]);
        assert_eq!(st.scaled(), &[0.125; 4]);
    }

    #[test]
    fn equal_depth_balances_uniform_values() {
        let vals: Vec<f64> = (0..100).map(|v| v as f64).collect();
        let s = store(AttrKind::Integer, 99.0, &vals);
        let st = DbStates::build(&s, 4, BinMode::EqualDepth).unwrap();
        assert_eq!(st.raw_counts(), &[25, 25, 25, 25]);
    }

    #[test]
    fn equal_depth_edges_stay_strict_with_ties() {
        let vals = vec![3.0; 50];
        let p = BinPartition::equal_depth(0.0, 10.0, 8, &vals);
        assert!(p.edges.windows(2).all(|w| w[0] < w[1]));
        assert_eq!((p.edges[0], p.edges[8]), (0.0, 10.0));
    }

    #[test]
    fn insert_then_delete_restores_bits() {
        let mut s = store(AttrKind::Integer, 9.0, &[1.0, 5.0]);
        let mut st = DbStates::build(&s, 4, BinMode::EqualWidth).unwrap();
        let before = st.clone();
        let d = s
            .apply(&DmlStatement::Insert {
                rel: 0,
                values: vec![7.0],
            })
            .unwrap();
        st.update(&d).unwrap();
        assert_ne!(st, before);
        let Delta::Inserted { row, .. } = d else { panic!() };
        let d = s.apply(&DmlStatement::Delete { rel: 0, row }).unwrap();
        st.update(&d).unwrap();
        assert_eq!(st, before);
    }

    #[test]
    fn same_bin_update_touches_nothing() {
        let mut s = store(AttrKind::Integer, 99.0, &[10.0]);
        let mut st = DbStates::build(&s, 4, BinMode::EqualWidth).unwrap();
        let d = s
            .apply(&DmlStatement::Update {
                rel: 0,
                row: 0,
                attr: 0,
                value: 11.0,
            })
            .unwrap();
        assert!(st.update(&d).unwrap().is_empty());
        assert_eq!(st.raw_counts(), &[1, 0, 0, 0]);
    }

    #[test]
    fn desynchronised_delete_is_an_error() {
        let s = store(AttrKind::Integer, 9.0, &[1.0]);
        let mut st = DbStates::build(&s, 2, BinMode::EqualWidth).unwrap();
        let ghost = Delta::Deleted {
            rel: 0,
            row: 9,
            values: vec![8.0],
        };
        assert!(matches!(st.update(&ghost), Err(StatesError::NegativeCount { .. })));
    }

    #[test]
    fn default_bin_count_is_accepted() {
        let s = store(AttrKind::Integer, 999.0, &[1.0, 500.0]);
        let st = DbStates::build(&s, 40, BinMode::EqualWidth).unwrap();
        assert_eq!(st.matrix().shape(), [1, 40]);
    }

    #[test]
    fn out_of_range_values_clamp_to_end_bins() {
        let p = BinPartition::equal_width(0.0, 10.0, 5);
        assert_eq!(p.locate(-1.0), (0, true));
        assert_eq!(p.locate(10.0), (4, true));
        assert_eq!(p.locate(2.0), (1, false));
        assert_eq!(p.locate(1.999), (0, false));
    }

    #[test]
    fn pool_round_trip() {
        let mut s = store(AttrKind::Real, 1.0, &[0.1, 0.2, 0.7]);
        let st0 = DbStates::build(&s, 3, BinMode::EqualDepth).unwrap();
        let d = s
            .apply(&DmlStatement::Insert {
                rel: 0,
                values: vec![0.95],
            })
            .unwrap();
        let mut st1 = st0.snapshot();
        st1.update(&d).unwrap();
        let mut buf = Vec::new();
        write_pool(&mut buf, &st0, &[(0, &st0), (5, &st1)]).unwrap();
        let back = read_pool(buf.as_slice()).unwrap();
        assert_eq!(back, vec![(0, st0), (5, st1)]);
    }
}
