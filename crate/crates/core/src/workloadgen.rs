//! Dynamic workload generation and replay.
//!
//! A workload bulk-loads about two thirds of the data, then interleaves
//! single-row inserts, deletes and updates with query packs (a query plus
//! all of its connected sub-queries). The statement list is split in half:
//! the first half is the training part (its query packs are replicated and
//! mixed in), the second the evaluation part, where every pack runs only
//! after the database has drifted by at least a minimum changing rate.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dbstate::{BinMode, DbStates, StatesError};
use crate::relstore::{
    count_hash_join, count_nested_loop, enumerate_sub_queries, parse_sql, AttrKind, AttrRef,
    CmpOp, Delta, DmlStatement, FilterPredicate, JoinPattern, RowId, RowStore, Schema,
    StoreError, SubQuery,
};

#[derive(Debug, thiserror::Error)]
pub enum WorkloadError {
    #[error("query generation gave up after {0} attempts")]
    GenerationExhausted(usize),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("workload script: {0}")]
    Script(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    States(#[from] StatesError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const MAX_QUERY_ATTEMPTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WorkloadKind {
    InsertHeavy,
    UpdateHeavy,
    DistShift,
    Static,
}

impl WorkloadKind {
    pub fn name(self) -> &'static str {
        match self {
            WorkloadKind::InsertHeavy => "insert-heavy",
            WorkloadKind::UpdateHeavy => "update-heavy",
            WorkloadKind::DistShift => "dist-shift",
            WorkloadKind::Static => "static",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            WorkloadKind::InsertHeavy,
            WorkloadKind::UpdateHeavy,
            WorkloadKind::DistShift,
            WorkloadKind::Static,
        ]
        .into_iter()
        .find(|k| k.name() == s)
    }

    /// Relative numbers of inserts, deletes and updates.
    pub fn ratios(self) -> (usize, usize, usize) {
        match self {
            WorkloadKind::InsertHeavy | WorkloadKind::DistShift => (2, 1, 1),
            WorkloadKind::UpdateHeavy => (1, 1, 2),
            WorkloadKind::Static => (0, 0, 0),
        }
    }
}

/// Splits `budget` statements by `ratios`; leftover statements go to the
/// earliest kinds so counts stay within one of the exact ratio.
pub fn dml_counts(budget: usize, ratios: (usize, usize, usize)) -> (usize, usize, usize) {
    let parts = [ratios.0, ratios.1, ratios.2];
    let total: usize = parts.iter().sum();
    if total == 0 {
        return (0, 0, 0);
    }
    let mut counts = parts.map(|p| budget * p / total);
    let mut rest = budget - counts.iter().sum::<usize>();
    for (c, p) in counts.iter_mut().zip(parts) {
        if rest > 0 && p > 0 {
            *c += 1;
            rest -= 1;
        }
    }
    (counts[0], counts[1], counts[2])
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorkloadConfig {
    pub kind: WorkloadKind,
    pub seed: u64,
    /// Total number of DML statements across both parts.
    pub dml_budget: usize,
    pub train_queries: usize,
    pub eval_queries: usize,
    /// Replicas of each training pack mixed into the training part.
    pub train_copies: usize,
    pub min_rho: f64,
    pub initial_fraction: f64,
    /// Percentile bounding inserted first-attribute values for dist-shift.
    pub shift_percentile: f64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            kind: WorkloadKind::InsertHeavy,
            seed: 0,
            dml_budget: 8000,
            train_queries: 600,
            eval_queries: 200,
            train_copies: 3,
            min_rho: 0.2,
            initial_fraction: 2.0 / 3.0,
            shift_percentile: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryPack {
    /// Position of the pack among all query statements of the script.
    pub ordinal: usize,
    pub query: SubQuery,
    pub sub_queries: Vec<SubQuery>,
}

impl QueryPack {
    pub fn new(ordinal: usize, query: SubQuery) -> Self {
        let sub_queries = enumerate_sub_queries(&query);
        Self {
            ordinal,
            query,
            sub_queries,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Statement {
    Dml(DmlStatement),
    Query(QueryPack),
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorkloadScript {
    pub kind: WorkloadKind,
    pub seed: u64,
    pub min_rho: f64,
    pub initial_load: Vec<Vec<Vec<f64>>>,
    pub statements: Vec<Statement>,
    /// Index of the first evaluation-part statement.
    pub split_index: usize,
}

impl WorkloadScript {
    pub fn dml_counts(&self) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        for s in &self.statements {
            match s {
                Statement::Dml(DmlStatement::Insert { .. }) => c.0 += 1,
                Statement::Dml(DmlStatement::Delete { .. }) => c.1 += 1,
                Statement::Dml(DmlStatement::Update { .. }) => c.2 += 1,
                Statement::Query(_) => {}
            }
        }
        c
    }

    pub fn packs(&self) -> impl Iterator<Item = (usize, &QueryPack)> {
        self.statements.iter().enumerate().filter_map(|(i, s)| match s {
            Statement::Query(p) => Some((i, p)),
            Statement::Dml(_) => None,
        })
    }
}

/// Inserts, deletes and updates since the training/evaluation boundary.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ChangeTracker {
    pub h_size: usize,
    pub inserts: usize,
    pub deletes: usize,
    pub updates: usize,
}

impl ChangeTracker {
    pub fn new(h_size: usize) -> Self {
        Self {
            h_size,
            ..Self::default()
        }
    }

    pub fn record(&mut self, stmt: &DmlStatement) {
        match stmt {
            DmlStatement::Insert { .. } => self.inserts += 1,
            DmlStatement::Delete { .. } => self.deletes += 1,
            DmlStatement::Update { .. } => self.updates += 1,
        }
    }

    /// `(I + D + 2U) / |H|`.
    pub fn rho(&self) -> f64 {
        (self.inserts + self.deletes + 2 * self.updates) as f64 / self.h_size.max(1) as f64
    }
}

/// Subsets of `edges` (schema joins among `rels`) that connect all of `rels`.
pub fn connecting_join_sets(schema: &Schema, rels: &[usize]) -> Vec<Vec<JoinPattern>> {
    let edges: Vec<JoinPattern> = schema
        .joins()
        .iter()
        .filter(|j| rels.contains(&j.left.rel) && rels.contains(&j.right.rel))
        .copied()
        .collect();
    if rels.len() == 1 {
        return vec![Vec::new()];
    }
    assert!(edges.len() <= 20, "too many candidate join conditions to enumerate");
    let mut out = Vec::new();
    for mask in 1u32..(1 << edges.len()) {
        let set: Vec<JoinPattern> = (0..edges.len())
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| edges[i])
            .collect();
        if SubQuery::new(rels.to_vec(), set.clone(), vec![]).is_connected() {
            out.push(set);
        }
    }
    out
}

/// Draws one random query. Constants are taken from `initial` rows.
pub fn generate_query<R: Rng>(
    schema: &Schema,
    initial: &[Vec<Vec<f64>>],
    rng: &mut R,
) -> Result<SubQuery, WorkloadError> {
    for _ in 0..MAX_QUERY_ATTEMPTS {
        let rels: Vec<usize> = (0..schema.num_relations())
            .filter(|_| rng.gen_bool(0.5))
            .collect();
        if rels.is_empty() || rels.iter().any(|&r| initial[r].is_empty()) {
            continue;
        }
        let options = connecting_join_sets(schema, &rels);
        if options.is_empty() {
            continue;
        }
        let joins = options[rng.gen_range(0..options.len())].clone();
        let mut filters = Vec::new();
        for &r in &rels {
            for (a, def) in schema.relation(r).attributes.iter().enumerate() {
                let attr = AttrRef::new(r, a);
                if !rng.gen_bool(0.5) {
                    continue;
                }
                let sample = |rng: &mut R| initial[r][rng.gen_range(0..initial[r].len())][a];
                if def.kind == AttrKind::Categorical {
                    filters.push(FilterPredicate::new(attr, CmpOp::Eq, sample(rng)));
                    continue;
                }
                let lower = |rng: &mut R| if rng.gen_bool(0.5) { CmpOp::Ge } else { CmpOp::Gt };
                let upper = |rng: &mut R| if rng.gen_bool(0.5) { CmpOp::Le } else { CmpOp::Lt };
                if rng.gen_bool(0.5) {
                    // One-sided.
                    let op = if rng.gen_bool(0.5) { lower(rng) } else { upper(rng) };
                    filters.push(FilterPredicate::new(attr, op, sample(rng)));
                } else {
                    let (x, y) = (sample(rng), sample(rng));
                    let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
                    filters.push(FilterPredicate::new(attr, lower(rng), lo));
                    filters.push(FilterPredicate::new(attr, upper(rng), hi));
                }
            }
        }
        return Ok(SubQuery::new(rels, joins, filters));
    }
    Err(WorkloadError::GenerationExhausted(MAX_QUERY_ATTEMPTS))
}

/// Nearest-rank percentile (`p` in `(0, 1]`) of `values`.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// Simulated live row ids while DML is generated.
struct LiveRows {
    ids: Vec<Vec<RowId>>,
    next: Vec<RowId>,
}

impl LiveRows {
    fn total(&self) -> usize {
        self.ids.iter().map(Vec::len).sum()
    }

    /// Uniformly random live row across all relations.
    fn pick<R: Rng>(&self, rng: &mut R) -> Option<(usize, usize)> {
        let total = self.total();
        if total == 0 {
            return None;
        }
        let mut k = rng.gen_range(0..total);
        for (r, ids) in self.ids.iter().enumerate() {
            if k < ids.len() {
                return Some((r, k));
            }
            k -= ids.len();
        }
        unreachable!()
    }
}

#[derive(Clone, Copy, PartialEq)]
enum DmlKind {
    Insert,
    Delete,
    Update,
}

pub fn generate_workload(
    schema: &Schema,
    full: &[Vec<Vec<f64>>],
    cfg: &WorkloadConfig,
) -> Result<WorkloadScript, WorkloadError> {
    if full.len() != schema.num_relations() || full.iter().any(|r| r.is_empty()) {
        return Err(WorkloadError::InsufficientData(
            "every relation needs at least one row".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Initial load and insert pool.
    let mut initial = Vec::with_capacity(full.len());
    let mut pool = Vec::with_capacity(full.len());
    for rows in full {
        let mut rows = rows.clone();
        rows.shuffle(&mut rng);
        let n_pool = rows.len() - (cfg.initial_fraction * rows.len() as f64).round() as usize;
        if cfg.kind == WorkloadKind::DistShift {
            let firsts: Vec<f64> = rows.iter().map(|r| r[0]).collect();
            let bound = percentile(&firsts, cfg.shift_percentile);
            let (low, high): (Vec<_>, Vec<_>) = rows.into_iter().partition(|r| r[0] <= bound);
            let take = n_pool.min(low.len());
            pool.push(low[..take].to_vec());
            let mut init = high;
            init.extend_from_slice(&low[take..]);
            init.shuffle(&mut rng);
            initial.push(init);
        } else if cfg.kind == WorkloadKind::Static {
            pool.push(Vec::new());
            initial.push(rows);
        } else {
            pool.push(rows[rows.len() - n_pool..].to_vec());
            rows.truncate(rows.len() - n_pool);
            initial.push(rows);
        }
    }

    // DML statements, simulated against live row ids so none is stale.
    let (n_ins, n_del, n_upd) = dml_counts(cfg.dml_budget, cfg.kind.ratios());
    let pool_rows: usize = pool.iter().map(Vec::len).sum();
    if n_ins > pool_rows {
        return Err(WorkloadError::InsufficientData(format!(
            "{n_ins} inserts requested but only {pool_rows} rows are held back"
        )));
    }
    let mut kinds: Vec<DmlKind> = std::iter::repeat(DmlKind::Insert)
        .take(n_ins)
        .chain(std::iter::repeat(DmlKind::Delete).take(n_del))
        .chain(std::iter::repeat(DmlKind::Update).take(n_upd))
        .collect();
    kinds.shuffle(&mut rng);
    let mut live = LiveRows {
        ids: initial.iter().map(|r| (0..r.len() as RowId).collect()).collect(),
        next: initial.iter().map(|r| r.len() as RowId).collect(),
    };
    let mut remaining: Vec<Vec<Vec<f64>>> = pool.clone();
    let mut dml = Vec::with_capacity(kinds.len());
    for k in kinds {
        let stmt = match k {
            DmlKind::Insert => {
                let left: usize = remaining.iter().map(Vec::len).sum();
                let mut pick = rng.gen_range(0..left);
                let rel = remaining
                    .iter()
                    .position(|r| {
                        if pick < r.len() {
                            true
                        } else {
                            pick -= r.len();
                            false
                        }
                    })
                    .unwrap();
                let values = remaining[rel].swap_remove(pick);
                live.ids[rel].push(live.next[rel]);
                live.next[rel] += 1;
                DmlStatement::Insert { rel, values }
            }
            DmlKind::Delete => {
                let (rel, i) = live.pick(&mut rng).ok_or_else(|| {
                    WorkloadError::InsufficientData("no rows left to delete".into())
                })?;
                let row = live.ids[rel].swap_remove(i);
                DmlStatement::Delete { rel, row }
            }
            DmlKind::Update => {
                let (rel, i) = live.pick(&mut rng).ok_or_else(|| {
                    WorkloadError::InsufficientData("no rows left to update".into())
                })?;
                let row = live.ids[rel][i];
                let defs = &schema.relation(rel).attributes;
                let attr = rng.gen_range(0..defs.len());
                let value = if pool[rel].is_empty() {
                    let d = &defs[attr];
                    if d.kind.is_integral() {
                        rng.gen_range(d.low as i64..=d.high as i64) as f64
                    } else {
                        rng.gen_range(d.low..=d.high)
                    }
                } else {
                    pool[rel][rng.gen_range(0..pool[rel].len())][attr]
                };
                DmlStatement::Update {
                    rel,
                    row,
                    attr,
                    value,
                }
            }
        };
        dml.push(stmt);
    }
    let half = dml.len() / 2;
    let (train_dml, eval_dml) = dml.split_at(half);

    // Queries.
    let mut train_q = Vec::with_capacity(cfg.train_queries);
    for _ in 0..cfg.train_queries {
        train_q.push(generate_query(schema, &initial, &mut rng)?);
    }
    let mut eval_q = Vec::with_capacity(cfg.eval_queries);
    for _ in 0..cfg.eval_queries {
        eval_q.push(generate_query(schema, &initial, &mut rng)?);
    }
    let mut train_packs: Vec<SubQuery> = Vec::with_capacity(train_q.len() * cfg.train_copies.max(1));
    for _ in 0..cfg.train_copies.max(1) {
        train_packs.extend(train_q.iter().cloned());
    }
    train_packs.shuffle(&mut rng);

    // Training part: packs at uniformly random gaps between DML statements.
    let mut gaps: Vec<usize> = (0..train_packs.len())
        .map(|_| rng.gen_range(0..=train_dml.len()))
        .collect();
    gaps.sort_unstable();
    let mut statements = Vec::new();
    let mut ordinal = 0;
    let mut packs = train_packs.into_iter().zip(gaps).peekable();
    for i in 0..=train_dml.len() {
        while let Some((q, _)) = packs.next_if(|(_, g)| *g == i) {
            statements.push(Statement::Query(QueryPack::new(ordinal, q)));
            ordinal += 1;
        }
        if i < train_dml.len() {
            statements.push(Statement::Dml(train_dml[i].clone()));
        }
    }
    let split_index = statements.len();

    // Evaluation part: packs only once the changing rate reaches `min_rho`.
    let first_ok = if cfg.kind == WorkloadKind::Static {
        0
    } else {
        let h_size = live_size_after(&initial, train_dml);
        let mut tracker = ChangeTracker::new(h_size);
        let mut first = None;
        if tracker.rho() >= cfg.min_rho {
            first = Some(0);
        }
        for (i, s) in eval_dml.iter().enumerate() {
            if first.is_some() {
                break;
            }
            tracker.record(s);
            if tracker.rho() >= cfg.min_rho {
                first = Some(i + 1);
            }
        }
        first.ok_or_else(|| {
            WorkloadError::InsufficientData(format!(
                "evaluation part reaches changing rate {:.3} < {}",
                tracker.rho(),
                cfg.min_rho
            ))
        })?
    };
    let mut gaps: Vec<usize> = (0..eval_q.len())
        .map(|_| rng.gen_range(first_ok..=eval_dml.len()))
        .collect();
    gaps.sort_unstable();
    let mut packs = eval_q.into_iter().zip(gaps).peekable();
    for i in 0..=eval_dml.len() {
        while let Some((q, _)) = packs.next_if(|(_, g)| *g == i) {
            statements.push(Statement::Query(QueryPack::new(ordinal, q)));
            ordinal += 1;
        }
        if i < eval_dml.len() {
            statements.push(Statement::Dml(eval_dml[i].clone()));
        }
    }

    Ok(WorkloadScript {
        kind: cfg.kind,
        seed: cfg.seed,
        min_rho: cfg.min_rho,
        initial_load: initial,
        statements,
        split_index,
    })
}

fn live_size_after(initial: &[Vec<Vec<f64>>], dml: &[DmlStatement]) -> usize {
    let mut n: isize = initial.iter().map(|r| r.len() as isize).sum();
    for s in dml {
        match s {
            DmlStatement::Insert { .. } => n += 1,
            DmlStatement::Delete { .. } => n -= 1,
            DmlStatement::Update { .. } => {}
        }
    }
    n.max(0) as usize
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
enum Record {
    Header {
        kind: WorkloadKind,
        seed: u64,
        #[serde(rename = "splitIndex")]
        split_index: usize,
        #[serde(rename = "minRho")]
        min_rho: f64,
    },
    Insert {
        rel: String,
        values: Vec<f64>,
    },
    Delete {
        rel: String,
        row: RowId,
    },
    Update {
        rel: String,
        row: RowId,
        attr: String,
        value: f64,
    },
    Query {
        ordinal: usize,
        sql: String,
    },
}

/// Writes the statement stream as one JSON object per line.
pub fn write_script<W: Write>(w: &mut W, schema: &Schema, script: &WorkloadScript) -> Result<(), WorkloadError> {
    let mut put = |rec: &Record| -> Result<(), WorkloadError> {
        let line = serde_json::to_string(rec).map_err(|e| WorkloadError::Script(e.to_string()))?;
        writeln!(w, "{line}")?;
        Ok(())
    };
    put(&Record::Header {
        kind: script.kind,
        seed: script.seed,
        split_index: script.split_index,
        min_rho: script.min_rho,
    })?;
    for s in &script.statements {
        let rec = match s {
            Statement::Dml(DmlStatement::Insert { rel, values }) => Record::Insert {
                rel: schema.relation(*rel).name.clone(),
                values: values.clone(),
            },
            Statement::Dml(DmlStatement::Delete { rel, row }) => Record::Delete {
                rel: schema.relation(*rel).name.clone(),
                row: *row,
            },
            Statement::Dml(DmlStatement::Update {
                rel,
                row,
                attr,
                value,
            }) => Record::Update {
                rel: schema.relation(*rel).name.clone(),
                row: *row,
                attr: schema.relation(*rel).attributes[*attr].name.clone(),
                value: *value,
            },
            Statement::Query(p) => Record::Query {
                ordinal: p.ordinal,
                sql: p.query.to_sql(schema),
            },
        };
        put(&rec)?;
    }
    Ok(())
}

/// Reads a statement stream; `initial_load` comes from the CSV directory.
pub fn read_script<R: BufRead>(
    r: R,
    schema: &Schema,
    initial_load: Vec<Vec<Vec<f64>>>,
) -> Result<WorkloadScript, WorkloadError> {
    let mut header = None;
    let mut statements = Vec::new();
    let rel_of = |name: &str| {
        schema
            .relation_index(name)
            .ok_or_else(|| WorkloadError::Store(StoreError::UnknownRelation(name.to_string())))
    };
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| WorkloadError::Script(format!("line {}: {e}", n + 1)))?;
        let stmt = match rec {
            Record::Header {
                kind,
                seed,
                split_index,
                min_rho,
            } => {
                header = Some((kind, seed, split_index, min_rho));
                continue;
            }
            Record::Insert { rel, values } => Statement::Dml(DmlStatement::Insert {
                rel: rel_of(&rel)?,
                values,
            }),
            Record::Delete { rel, row } => Statement::Dml(DmlStatement::Delete {
                rel: rel_of(&rel)?,
                row,
            }),
            Record::Update {
                rel,
                row,
                attr,
                value,
            } => {
                let r = rel_of(&rel)?;
                let a = schema
                    .attr_index(r, &attr)
                    .ok_or_else(|| StoreError::UnknownAttribute(format!("{rel}.{attr}")))?;
                Statement::Dml(DmlStatement::Update {
                    rel: r,
                    row,
                    attr: a,
                    value,
                })
            }
            Record::Query { ordinal, sql } => {
                Statement::Query(QueryPack::new(ordinal, parse_sql(schema, &sql)?))
            }
        };
        statements.push(stmt);
    }
    let (kind, seed, split_index, min_rho) =
        header.ok_or_else(|| WorkloadError::Script("missing header record".into()))?;
    if split_index > statements.len() {
        return Err(WorkloadError::Script("split index past the end".into()));
    }
    Ok(WorkloadScript {
        kind,
        seed,
        min_rho,
        initial_load,
        statements,
        split_index,
    })
}

/// Writes `workload.jsonl` and `initial/<relation>.csv` under `dir`.
pub fn save_script(dir: &Path, schema: &Schema, script: &WorkloadScript) -> Result<(), WorkloadError> {
    std::fs::create_dir_all(dir)?;
    crate::relstore::write_csv_dir(schema, &script.initial_load, &dir.join("initial"))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("workload.jsonl"))?);
    write_script(&mut f, schema, script)?;
    f.flush()?;
    Ok(())
}

pub fn load_script(dir: &Path, schema: &Schema) -> Result<WorkloadScript, WorkloadError> {
    let initial = crate::relstore::load_csv_dir(schema, &dir.join("initial"))?;
    let f = std::fs::File::open(dir.join("workload.jsonl"))
        .map_err(|e| WorkloadError::Script(format!("{}: {e}", dir.join("workload.jsonl").display())))?;
    read_script(std::io::BufReader::new(f), schema, initial)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Training,
    Evaluation,
}

/// Which exact counter labels sub-queries during replay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CardinalityCounter {
    NestedLoop,
    HashJoin,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReplayConfig {
    pub bins: usize,
    pub mode: BinMode,
    pub counter: CardinalityCounter,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            bins: 40,
            mode: BinMode::EqualWidth,
            counter: CardinalityCounter::HashJoin,
        }
    }
}

pub struct PackEvent<'a> {
    pub phase: Phase,
    pub pack: &'a QueryPack,
    /// Changes whenever a statement altered the database.
    pub snapshot_id: u64,
    pub states: Arc<DbStates>,
    pub store: &'a RowStore,
    /// True cardinality of each sub-query, in pack order.
    pub cards: Vec<u64>,
    /// Changing rate since the split (evaluation part only).
    pub rho: Option<f64>,
}

pub trait ReplaySink {
    /// Called once, between the training and evaluation parts.
    fn on_split(&mut self, _store: &RowStore, _states: &DbStates) -> Result<(), WorkloadError> {
        Ok(())
    }

    fn on_pack(&mut self, event: &PackEvent<'_>) -> Result<(), WorkloadError>;
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReplaySummary {
    pub applied: usize,
    pub skipped: usize,
    pub packs: usize,
    pub final_rho: f64,
}

/// Applies `script` to a fresh store, maintaining DB states, and reports
/// every query pack to `sink` with exact sub-query cardinalities.
pub fn replay<S: ReplaySink + ?Sized>(
    schema: Arc<Schema>,
    script: &WorkloadScript,
    cfg: &ReplayConfig,
    sink: &mut S,
) -> Result<ReplaySummary, WorkloadError> {
    let mut store = RowStore::with_rows(schema, &script.initial_load)?;
    let mut states = DbStates::build(&store, cfg.bins, cfg.mode)?;
    let mut shared = Arc::new(states.snapshot());
    let mut snapshot_id = 0u64;
    let mut dirty = false;
    let mut tracker: Option<ChangeTracker> = None;
    let mut summary = ReplaySummary::default();
    for (i, stmt) in script.statements.iter().enumerate() {
        if i == script.split_index && tracker.is_none() {
            sink.on_split(&store, &states)?;
            tracker = Some(ChangeTracker::new(store.total_rows()));
        }
        match stmt {
            Statement::Dml(d) => match store.apply(d) {
                Ok(delta) => {
                    states.update(&delta)?;
                    summary.applied += 1;
                    dirty = true;
                    if let Some(t) = tracker.as_mut() {
                        t.record(d);
                    }
                }
                Err(StoreError::UnknownRow { rel, row }) => {
                    warn!("statement {i}: row {row} of relation #{rel} no longer exists; skipped");
                    summary.skipped += 1;
                }
                Err(e) => return Err(e.into()),
            },
            Statement::Query(pack) => {
                if dirty {
                    shared = Arc::new(states.snapshot());
                    snapshot_id += 1;
                    dirty = false;
                }
                let cards: Vec<u64> = pack
                    .sub_queries
                    .par_iter()
                    .map(|q| match cfg.counter {
                        CardinalityCounter::HashJoin => count_hash_join(&store, q),
                        CardinalityCounter::NestedLoop => count_nested_loop(&store, q),
                    })
                    .collect();
                let ev = PackEvent {
                    phase: if tracker.is_some() {
                        Phase::Evaluation
                    } else {
                        Phase::Training
                    },
                    pack,
                    snapshot_id,
                    states: Arc::clone(&shared),
                    store: &store,
                    cards,
                    rho: tracker.map(|t| t.rho()),
                };
                sink.on_pack(&ev)?;
                summary.packs += 1;
            }
        }
    }
    if tracker.is_none() {
        sink.on_split(&store, &states)?;
        tracker = Some(ChangeTracker::new(store.total_rows()));
    }
    summary.final_rho = tracker.map(|t| t.rho()).unwrap_or(0.0);
    Ok(summary)
}

/// Sub-query totals by kind over every pack of a phase.
pub fn count_sub_queries(script: &WorkloadScript, phase: Phase) -> BTreeMap<&'static str, usize> {
    let mut m = BTreeMap::new();
    for (i, p) in script.packs() {
        let ph = if i >= script.split_index {
            Phase::Evaluation
        } else {
            Phase::Training
        };
        if ph != phase {
            continue;
        }
        for q in &p.sub_queries {
            *m.entry(if q.relations.len() == 1 { "single" } else { "join" })
                .or_insert(0) += 1;
        }
    }
    m
}

/// Convenience: apply one delta to both structures (used by tests).
pub fn apply_both(store: &mut RowStore, states: &mut DbStates, stmt: &DmlStatement) -> Result<Delta, WorkloadError> {
    let d = store.apply(stmt)?;
    states.update(&d)?;
    Ok(d)
}
