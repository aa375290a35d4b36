//! Baseline estimators, Q-error evaluation and result files.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use alece_autodiff::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dbstate::DbStates;
use crate::model::Learner;
use crate::queryfeat::{canonicalize_joins, filter_interval, FeatError, Featurizer};
use crate::relstore::{count_hash_join, RowStore, Schema, StoreError, SubQuery, SubQueryKind};
use crate::workloadgen::{PackEvent, Phase, ReplaySink, WorkloadError};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("q-error needs positive cardinalities, got estimate {estimate} and truth {truth}")]
    NonPositive { estimate: f64, truth: f64 },
    #[error("estimator {0} used before it was built")]
    NotBuilt(String),
    #[error("estimate file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Feat(#[from] FeatError),
    #[error(transparent)]
    Model(#[from] alece_autodiff::AutodiffError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `max(T/P, P/T)`.
pub fn q_error(estimate: f64, truth: f64) -> Result<f64, BenchError> {
    if !(estimate > 0.0 && truth > 0.0) {
        return Err(BenchError::NonPositive { estimate, truth });
    }
    Ok((truth / estimate).max(estimate / truth))
}

/// Anything that produces cardinality estimates for query packs.
///
/// `build` runs once at the training/evaluation boundary; frozen baselines
/// take their statistics there.
pub trait Estimator {
    fn name(&self) -> String;

    fn build(&mut self, _store: &RowStore, _states: &DbStates) -> Result<(), BenchError> {
        Ok(())
    }

    /// One estimate per sub-query of the pack, in pack order.
    fn estimate_pack(&self, event: &PackEvent<'_>) -> Result<Vec<f64>, BenchError>;
}

/// Returns the true cardinalities; a sanity floor for every report.
pub struct OptimalEstimator;

impl Estimator for OptimalEstimator {
    fn name(&self) -> String {
        "optimal".into()
    }

    fn estimate_pack(&self, event: &PackEvent<'_>) -> Result<Vec<f64>, BenchError> {
        Ok(event.cards.iter().map(|&c| c as f64).collect())
    }
}

/// A trained model fed the live DB-state snapshot of each pack.
pub struct LearnedEstimator<L: Learner> {
    pub model: L,
    pub featurizer: Featurizer,
}

impl<L: Learner> LearnedEstimator<L> {
    pub fn new(model: L, featurizer: Featurizer) -> Self {
        Self { model, featurizer }
    }

    pub fn estimate_queries(&self, states: &DbStates, queries: &[SubQuery]) -> Result<Vec<f64>, BenchError> {
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let rows = queries
            .iter()
            .map(|q| self.featurizer.featurize(q).map(|f| f.full()))
            .collect::<Result<Vec<_>, _>>()?;
        let q = Tensor::from_rows(&rows)?;
        Ok(self.model.estimate(&states.matrix(), &q)?)
    }
}

impl<L: Learner> Estimator for LearnedEstimator<L> {
    fn name(&self) -> String {
        self.model.name().into()
    }

    fn estimate_pack(&self, event: &PackEvent<'_>) -> Result<Vec<f64>, BenchError> {
        self.estimate_queries(&event.states, &event.pack.sub_queries)
    }
}

pub const PG_DEFAULT_BINS: usize = 100;

#[derive(Clone, Debug)]
struct AttrStats {
    low: f64,
    width: f64,
    counts: Vec<f64>,
    distinct: f64,
}

impl AttrStats {
    /// Fraction of rows inside `[lb, ub)`, uniform within each bin.
    fn selectivity(&self, lb: f64, ub: f64, rows: f64) -> f64 {
        if rows <= 0.0 || ub <= lb {
            return 0.0;
        }
        let bins = self.counts.len();
        let w = self.width / bins as f64;
        let mut hit = 0.0;
        for (j, &c) in self.counts.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let b0 = self.low + j as f64 * w;
            let b1 = if j + 1 == bins { self.low + self.width } else { b0 + w };
            if lb <= b0 && ub >= b1 {
                hit += c;
            } else {
                let overlap = ub.min(b1) - lb.max(b0);
                if overlap > 0.0 {
                    hit += c * overlap / (b1 - b0);
                }
            }
        }
        hit / rows
    }
}

/// Independence-assumption baseline from equal-width 1-D histograms and
/// distinct counts, frozen at build time.
pub struct PgEstimator {
    bins: usize,
    schema: Option<Arc<Schema>>,
    rels: Vec<(f64, Vec<AttrStats>)>,
}

impl PgEstimator {
    pub fn new(bins: usize) -> Self {
        Self {
            bins: bins.max(1),
            schema: None,
            rels: Vec::new(),
        }
    }

    pub fn build_from(&mut self, store: &RowStore) {
        let schema = Arc::clone(store.schema());
        self.rels = (0..schema.num_relations())
            .map(|r| {
                let rows: Vec<&[f64]> = store.rows(r).map(|(_, v)| v).collect();
                let attrs = schema
                    .relation(r)
                    .attributes
                    .iter()
                    .enumerate()
                    .map(|(a, def)| {
                        let (l, u) = def.hull();
                        let mut counts = vec![0.0; self.bins];
                        let mut seen = HashSet::new();
                        for row in &rows {
                            let v = row[a];
                            let j = (((v - l) / (u - l)) * self.bins as f64).floor();
                            counts[(j.max(0.0) as usize).min(self.bins - 1)] += 1.0;
                            seen.insert(v.to_bits());
                        }
                        AttrStats {
                            low: l,
                            width: u - l,
                            counts,
                            distinct: seen.len() as f64,
                        }
                    })
                    .collect();
                (rows.len() as f64, attrs)
            })
            .collect();
        self.schema = Some(schema);
    }

    pub fn estimate_query(&self, q: &SubQuery) -> Result<f64, BenchError> {
        let schema = self.schema.as_ref().ok_or_else(|| BenchError::NotBuilt("pg".into()))?;
        let mut est = 1.0;
        for &r in &q.relations {
            let (rows, attrs) = &self.rels[r];
            let mut card = *rows;
            for (a, stats) in attrs.iter().enumerate() {
                let preds: Vec<_> = q
                    .filters
                    .iter()
                    .filter(|f| f.attr.rel == r && f.attr.attr == a)
                    .collect();
                if preds.is_empty() {
                    continue;
                }
                let def = &schema.relation(r).attributes[a];
                let (lb, ub) = filter_interval(def, preds);
                card *= stats.selectivity(lb, ub, *rows);
            }
            est *= card;
        }
        for j in canonicalize_joins(&q.joins) {
            let v = |x: crate::relstore::AttrRef| self.rels[x.rel].1[x.attr].distinct;
            est /= v(j.left).max(v(j.right)).max(1.0);
        }
        Ok(est.max(1.0))
    }
}

impl Estimator for PgEstimator {
    fn name(&self) -> String {
        "pg".into()
    }

    fn build(&mut self, store: &RowStore, _states: &DbStates) -> Result<(), BenchError> {
        self.build_from(store);
        Ok(())
    }

    fn estimate_pack(&self, event: &PackEvent<'_>) -> Result<Vec<f64>, BenchError> {
        event.pack.sub_queries.iter().map(|q| self.estimate_query(q)).collect()
    }
}

/// Per-relation uniform samples drawn at build time; `N_q / p^m`.
pub struct UniSampEstimator {
    pub ratio: f64,
    pub seed: u64,
    sample: Option<RowStore>,
}

impl UniSampEstimator {
    pub fn new(ratio: f64, seed: u64) -> Self {
        Self {
            ratio,
            seed,
            sample: None,
        }
    }

    /// `⌈p·n⌉`, capped at `n`.
    pub fn sample_size(ratio: f64, n: usize) -> usize {
        ((ratio * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
    }

    pub fn build_from(&mut self, store: &RowStore) -> Result<(), BenchError> {
        let schema = Arc::clone(store.schema());
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut rows = Vec::with_capacity(schema.num_relations());
        for r in 0..schema.num_relations() {
            let all: Vec<&[f64]> = store.rows(r).map(|(_, v)| v).collect();
            let k = Self::sample_size(self.ratio, all.len());
            let mut idx = rand::seq::index::sample(&mut rng, all.len(), k).into_vec();
            idx.sort_unstable();
            rows.push(idx.into_iter().map(|i| all[i].to_vec()).collect());
        }
        self.sample = Some(RowStore::with_rows(schema, &rows)?);
        Ok(())
    }

    pub fn sample(&self) -> Option<&RowStore> {
        self.sample.as_ref()
    }

    pub fn estimate_query(&self, q: &SubQuery) -> Result<f64, BenchError> {
        let s = self.sample.as_ref().ok_or_else(|| BenchError::NotBuilt("unisamp".into()))?;
        let n = count_hash_join(s, q) as f64;
        Ok(n / self.ratio.powi(q.relations.len() as i32))
    }
}

impl Estimator for UniSampEstimator {
    fn name(&self) -> String {
        "unisamp".into()
    }

    fn build(&mut self, store: &RowStore, _states: &DbStates) -> Result<(), BenchError> {
        self.build_from(store)
    }

    fn estimate_pack(&self, event: &PackEvent<'_>) -> Result<Vec<f64>, BenchError> {
        event.pack.sub_queries.iter().map(|q| self.estimate_query(q)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubQueryResult {
    pub ordinal: usize,
    pub kind: SubQueryKind,
    pub sql: String,
    pub true_card: u64,
    pub estimate: f64,
    pub q_error: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quantiles {
    pub p50: f64,
    pub p90: f64,
    pub p95: f64,
    pub p99: f64,
}

/// Nearest-rank quantiles; `None` for an empty sample.
pub fn quantiles(values: &[f64]) -> Option<Quantiles> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let at = |p: f64| {
        let rank = ((p * v.len() as f64 - 1e-9).ceil() as usize).clamp(1, v.len());
        v[rank - 1]
    };
    Some(Quantiles {
        p50: at(0.5),
        p90: at(0.9),
        p95: at(0.95),
        p99: at(0.99),
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EstimatorReport {
    pub estimator: String,
    pub results: Vec<SubQueryResult>,
    pub build_seconds: f64,
    pub estimate_seconds: f64,
}

impl EstimatorReport {
    pub fn new(estimator: impl Into<String>) -> Self {
        Self {
            estimator: estimator.into(),
            ..Self::default()
        }
    }

    pub fn q_errors(&self, kind: Option<SubQueryKind>) -> Vec<f64> {
        self.results
            .iter()
            .filter(|r| kind.map_or(true, |k| r.kind == k))
            .map(|r| r.q_error)
            .collect()
    }

    pub fn quantiles(&self, kind: Option<SubQueryKind>) -> Option<Quantiles> {
        quantiles(&self.q_errors(kind))
    }

    pub fn mean_latency_ms(&self) -> f64 {
        if self.results.is_empty() {
            0.0
        } else {
            1e3 * self.estimate_seconds / self.results.len() as f64
        }
    }

    /// Appends one pack's estimates, clamping both sides to at least 1.
    pub fn record(&mut self, event: &PackEvent<'_>, estimates: &[f64]) -> Result<(), BenchError> {
        for ((q, &card), &est) in event.pack.sub_queries.iter().zip(&event.cards).zip(estimates) {
            let est = if est.is_finite() { est.max(1.0) } else { f64::MAX };
            let truth = card.max(1) as f64;
            self.results.push(SubQueryResult {
                ordinal: event.pack.ordinal,
                kind: q.kind(),
                sql: q.to_sql(event.store.schema()),
                true_card: card,
                estimate: est,
                q_error: q_error(est, truth)?,
            });
        }
        Ok(())
    }
}

/// Feeds evaluation-part packs to every estimator and collects reports.
pub struct EvaluationSink {
    pub estimators: Vec<Box<dyn Estimator>>,
    pub reports: Vec<EstimatorReport>,
}

impl EvaluationSink {
    pub fn new(estimators: Vec<Box<dyn Estimator>>) -> Self {
        let reports = estimators.iter().map(|e| EstimatorReport::new(e.name())).collect();
        Self { estimators, reports }
    }
}

fn boxed(e: BenchError) -> WorkloadError {
    WorkloadError::Script(format!("estimation failed: {e}"))
}

impl ReplaySink for EvaluationSink {
    fn on_split(&mut self, store: &RowStore, states: &DbStates) -> Result<(), WorkloadError> {
        for (e, rep) in self.estimators.iter_mut().zip(&mut self.reports) {
            let t = Instant::now();
            e.build(store, states).map_err(boxed)?;
            rep.build_seconds = t.elapsed().as_secs_f64();
        }
        Ok(())
    }

    fn on_pack(&mut self, event: &PackEvent<'_>) -> Result<(), WorkloadError> {
        if event.phase != Phase::Evaluation {
            return Ok(());
        }
        for (e, rep) in self.estimators.iter().zip(&mut self.reports) {
            let t = Instant::now();
            let est = e.estimate_pack(event).map_err(boxed)?;
            rep.estimate_seconds += t.elapsed().as_secs_f64();
            rep.record(event, &est).map_err(boxed)?;
        }
        Ok(())
    }
}

/// Row-count form written to estimate files: round half up, at least 1.
pub fn estimate_as_integer(est: f64) -> u64 {
    if !est.is_finite() {
        return if est > 0.0 { u64::MAX } else { 1 };
    }
    ((est + 0.5).floor().max(1.0)).min(u64::MAX as f64) as u64
}

pub const ESTIMATE_FILE_FORMAT: &str = "one line per sub-query in stream order: `<query ordinal> <estimate as integer>`; \
single-relation sub-queries go to single_cards.txt, multi-relation ones to join_cards.txt; \
single_sub_queries.txt and join_sub_queries.txt carry `<query ordinal> <sub-query SQL>` on matching lines";

/// Writes `single_cards.txt`, `join_cards.txt` and the matching
/// `*_sub_queries.txt` files into `dir`.
pub fn write_estimate_files(report: &EstimatorReport, dir: &Path) -> Result<(), BenchError> {
    std::fs::create_dir_all(dir)?;
    for (kind, stem) in [(SubQueryKind::Single, "single"), (SubQueryKind::Join, "join")] {
        let mut cards = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{stem}_cards.txt")))?);
        let mut sqls =
            std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{stem}_sub_queries.txt")))?);
        for r in report.results.iter().filter(|r| r.kind == kind) {
            writeln!(cards, "{} {}", r.ordinal, estimate_as_integer(r.estimate))?;
            writeln!(sqls, "{} {}", r.ordinal, r.sql)?;
        }
        cards.flush()?;
        sqls.flush()?;
    }
    Ok(())
}

/// Parses a `*_cards.txt` file into `(ordinal, estimate)` pairs.
pub fn read_estimate_file<R: BufRead>(r: R) -> Result<Vec<(usize, u64)>, BenchError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: &str| BenchError::Parse {
            line: i + 1,
            msg: msg.to_string(),
        };
        let mut it = line.split_whitespace();
        let ord = it.next().and_then(|s| s.parse().ok()).ok_or_else(|| err("bad ordinal"))?;
        let est = it.next().and_then(|s| s.parse().ok()).ok_or_else(|| err("bad estimate"))?;
        if it.next().is_some() {
            return Err(err("trailing fields"));
        }
        out.push((ord, est));
    }
    Ok(out)
}

/// Per-sub-query results as CSV.
pub fn write_report_csv<W: Write>(w: &mut W, report: &EstimatorReport) -> std::io::Result<()> {
    writeln!(w, "ordinal,kind,true_card,estimate,q_error")?;
    for r in &report.results {
        writeln!(w, "{},{},{},{},{}", r.ordinal, r.kind, r.true_card, r.estimate, r.q_error)?;
    }
    Ok(())
}

/// Quantiles per estimator and sub-query kind; empty subsets show `NA`.
pub fn write_quantiles_csv<W: Write>(w: &mut W, reports: &[EstimatorReport]) -> std::io::Result<()> {
    writeln!(w, "estimator,subset,count,p50,p90,p95,p99")?;
    for rep in reports {
        for (name, kind) in [
            ("all", None),
            ("single", Some(SubQueryKind::Single)),
            ("join", Some(SubQueryKind::Join)),
        ] {
            let n = rep.q_errors(kind).len();
            match rep.quantiles(kind) {
                Some(q) => writeln!(
                    w,
                    "{},{name},{n},{},{},{},{}",
                    rep.estimator, q.p50, q.p90, q.p95, q.p99
                )?,
                None => writeln!(w, "{},{name},0,NA,NA,NA,NA", rep.estimator)?,
            }
        }
    }
    Ok(())
}

/// Human-readable table, including build time and mean latency.
pub fn write_summary<W: Write>(w: &mut W, reports: &[EstimatorReport]) -> std::io::Result<()> {
    writeln!(
        w,
        "{:<10} {:>7} {:>10} {:>10} {:>10} {:>10} {:>10} {:>12}",
        "estimator", "n", "50%", "90%", "95%", "99%", "build(s)", "latency(ms)"
    )?;
    for rep in reports {
        let fmt = |x: Option<f64>| x.map_or("NA".to_string(), |v| format!("{v:.3}"));
        let q = rep.quantiles(None);
        writeln!(
            w,
            "{:<10} {:>7} {:>10} {:>10} {:>10} {:>10} {:>10.3} {:>12.4}",
            rep.estimator,
            rep.results.len(),
            fmt(q.map(|q| q.p50)),
            fmt(q.map(|q| q.p90)),
            fmt(q.map(|q| q.p95)),
            fmt(q.map(|q| q.p99)),
            rep.build_seconds,
            rep.mean_latency_ms()
        )?;
    }
    Ok(())
}
