//! End-to-end commands over a flat key/value run configuration: data and
//! workload generation, replay into training samples, training, estimation,
//! evaluation, reporting and the gradient check suite.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use alece_autodiff::gradcheck::{check_input_gradients, check_param_gradients};
use alece_autodiff::{read_checkpoint, write_checkpoint, Tape, Tensor};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bench::{
    write_estimate_files, write_quantiles_csv, write_report_csv, write_summary,
    Estimator, EstimatorReport, EvaluationSink, LearnedEstimator, OptimalEstimator, PgEstimator,
    SubQueryResult, UniSampEstimator,
};
use crate::dbstate::{read_pool, write_pool, BinMode, DbStates};
use crate::model::{AleceConfig, AleceModel, Learner, MlpModel, LAYER_NORM_EPS};
use crate::queryfeat::{Featurizer, JoinFeatVariant};
use crate::relstore::{load_csv_dir, write_csv_dir, Schema, SubQueryKind};
use crate::synth::{self, SynthConfig};
use crate::trainer::{
    log_label, read_samples, train, write_history, write_samples, SampleSet, TrainConfig,
    TrainOutcome, TrainingSample,
};
use crate::workloadgen::{
    generate_workload, load_script, replay, save_script, PackEvent, Phase, ReplayConfig,
    ReplaySink, WorkloadConfig, WorkloadError, WorkloadKind, WorkloadScript,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("check failed: {0}")]
    Check(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Data(_) => 3,
            PipelineError::Check(_) => 4,
        }
    }
}

fn data<E: std::fmt::Display>(e: E) -> PipelineError {
    PipelineError::Data(e.to_string())
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Alece,
    Mlp,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Alece => "alece",
            ModelKind::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "alece" => Some(ModelKind::Alece),
            "mlp" => Some(ModelKind::Mlp),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EstimatorKind {
    Alece,
    Mlp,
    Pg,
    UniSamp,
    Optimal,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 5] = [
        EstimatorKind::Alece,
        EstimatorKind::Mlp,
        EstimatorKind::Pg,
        EstimatorKind::UniSamp,
        EstimatorKind::Optimal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Alece => "alece",
            EstimatorKind::Mlp => "mlp",
            EstimatorKind::Pg => "pg",
            EstimatorKind::UniSamp => "unisamp",
            EstimatorKind::Optimal => "optimal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Every knob of a run. Paths are taken relative to the working directory.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub schema: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub workload_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub workload: WorkloadKind,
    pub dml_budget: usize,
    pub train_queries: usize,
    pub eval_queries: usize,
    pub train_copies: usize,
    pub min_rho: f64,
    pub d_x: usize,
    pub bin_mode: BinMode,
    pub n_enc: usize,
    pub n_ana: usize,
    pub heads: usize,
    pub join_variant: JoinFeatVariant,
    pub model: ModelKind,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub pg_bins: usize,
    pub unisamp_ratio: f64,
    pub synth_users: usize,
    pub synth_posts: usize,
    pub synth_comments: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let w = WorkloadConfig::default();
        let t = TrainConfig::default();
        let s = SynthConfig::default();
        Self {
            seed: None,
            schema: None,
            data_dir: None,
            workload_dir: None,
            out_dir: None,
            workload: w.kind,
            dml_budget: w.dml_budget,
            train_queries: w.train_queries,
            eval_queries: w.eval_queries,
            train_copies: w.train_copies,
            min_rho: w.min_rho,
            d_x: 40,
            bin_mode: BinMode::EqualWidth,
            n_enc: 4,
            n_ana: 4,
            heads: 8,
            join_variant: JoinFeatVariant::Full,
            model: ModelKind::Alece,
            max_epochs: t.max_epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            warmup_steps: t.warmup_steps,
            patience: t.patience,
            validation_fraction: t.validation_fraction,
            pg_bins: crate::bench::PG_DEFAULT_BINS,
            unisamp_ratio: 0.1,
            synth_users: s.users,
            synth_posts: s.posts,
            synth_comments: s.comments,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "seed",
    "schema",
    "data_dir",
    "workload_dir",
    "out_dir",
    "workload",
    "dml_budget",
    "train_queries",
    "eval_queries",
    "train_copies",
    "min_rho",
    "d_x",
    "bin_mode",
    "n_enc",
    "n_ana",
    "heads",
    "join_variant",
    "model",
    "max_epochs",
    "batch_size",
    "learning_rate",
    "warmup_steps",
    "patience",
    "validation_fraction",
    "pg_bins",
    "unisamp_ratio",
    "synth_users",
    "synth_posts",
    "synth_comments",
];

fn positive<T: std::str::FromStr + PartialOrd + Default>(key: &str, v: &str) -> Result<T> {
    let x: T = v
        .parse()
        .map_err(|_| PipelineError::Config(format!("{key}: cannot parse {v:?}")))?;
    if x <= T::default() {
        return Err(PipelineError::Config(format!("{key} must be positive, got {v}")));
    }
    Ok(x)
}

impl RunConfig {
    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let bad = |what: &str| PipelineError::Config(format!("{key}: unknown {what} {v:?}"));
        match key {
            "seed" => {
                self.seed = Some(
                    v.parse()
                        .map_err(|_| PipelineError::Config(format!("seed: cannot parse {v:?}")))?,
                )
            }
            "schema" => self.schema = Some(v.into()),
            "data_dir" => self.data_dir = Some(v.into()),
            "workload_dir" => self.workload_dir = Some(v.into()),
            "out_dir" => self.out_dir = Some(v.into()),
            "workload" => self.workload = WorkloadKind::parse(v).ok_or_else(|| bad("workload kind"))?,
            "dml_budget" => {
                self.dml_budget = v
                    .parse()
                    .map_err(|_| PipelineError::Config(format!("dml_budget: cannot parse {v:?}")))?
            }
            "train_queries" => self.train_queries = positive(key, v)?,
            "eval_queries" => self.eval_queries = positive(key, v)?,
            "train_copies" => self.train_copies = positive(key, v)?,
            "min_rho" => {
                let x: f64 = v
                    .parse()
                    .map_err(|_| PipelineError::Config(format!("min_rho: cannot parse {v:?}")))?;
                if !(0.0..=f64::MAX).contains(&x) {
                    return Err(PipelineError::Config("min_rho must be non-negative".into()));
                }
                self.min_rho = x;
            }
            "d_x" => self.d_x = positive(key, v)?,
            "bin_mode" => self.bin_mode = BinMode::parse(v).ok_or_else(|| bad("bin mode"))?,
            "n_enc" => self.n_enc = positive(key, v)?,
            "n_ana" => self.n_ana = positive(key, v)?,
            "heads" => self.heads = positive(key, v)?,
            "join_variant" => {
                self.join_variant = JoinFeatVariant::parse(v).ok_or_else(|| bad("join variant"))?
            }
            "model" => self.model = ModelKind::parse(v).ok_or_else(|| bad("model"))?,
            "max_epochs" => self.max_epochs = positive(key, v)?,
            "batch_size" => self.batch_size = positive(key, v)?,
            "learning_rate" => self.learning_rate = positive(key, v)?,
            "warmup_steps" => {
                self.warmup_steps = v
                    .parse()
                    .map_err(|_| PipelineError::Config(format!("warmup_steps: cannot parse {v:?}")))?
            }
            "patience" => self.patience = positive(key, v)?,
            "validation_fraction" => {
                let x: f64 = positive(key, v)?;
                if x >= 1.0 {
                    return Err(PipelineError::Config("validation_fraction must be below 1".into()));
                }
                self.validation_fraction = x;
            }
            "pg_bins" => self.pg_bins = positive(key, v)?,
            "unisamp_ratio" => {
                let x: f64 = positive(key, v)?;
                if x > 1.0 {
                    return Err(PipelineError::Config("unisamp_ratio must be at most 1".into()));
                }
                self.unisamp_ratio = x;
            }
            "synth_users" => self.synth_users = positive(key, v)?,
            "synth_posts" => self.synth_posts = positive(key, v)?,
            "synth_comments" => self.synth_comments = positive(key, v)?,
            _ => return Err(PipelineError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` TOML document on top of `self`.
    pub fn merge_toml_str(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = text.parse().map_err(|e| PipelineError::Config(format!("{e}")))?;
        for (k, v) in &table {
            let s = match v {
                toml::Value::String(s) => s.clone(),
                toml::Value::Integer(i) => i.to_string(),
                toml::Value::Float(f) => f.to_string(),
                toml::Value::Boolean(b) => b.to_string(),
                _ => return Err(PipelineError::Config(format!("{k}: nested values are not allowed"))),
            };
            self.set(k, &s)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.merge_toml_str(&text)?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| format!("{:?}", p.display().to_string()));
        if let Some(s) = self.seed {
            put("seed", s.to_string());
        }
        for (k, p) in [
            ("schema", &self.schema),
            ("data_dir", &self.data_dir),
            ("workload_dir", &self.workload_dir),
            ("out_dir", &self.out_dir),
        ] {
            if let Some(v) = path(p) {
                put(k, v);
            }
        }
        put("workload", format!("{:?}", self.workload.name()));
        put("dml_budget", self.dml_budget.to_string());
        put("train_queries", self.train_queries.to_string());
        put("eval_queries", self.eval_queries.to_string());
        put("train_copies", self.train_copies.to_string());
        put("min_rho", format!("{:?}", self.min_rho));
        put("d_x", self.d_x.to_string());
        put("bin_mode", format!("{:?}", self.bin_mode.name()));
        put("n_enc", self.n_enc.to_string());
        put("n_ana", self.n_ana.to_string());
        put("heads", self.heads.to_string());
        put("join_variant", format!("{:?}", self.join_variant.name()));
        put("model", format!("{:?}", self.model.name()));
        put("max_epochs", self.max_epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("learning_rate", format!("{:?}", self.learning_rate));
        put("warmup_steps", self.warmup_steps.to_string());
        put("patience", self.patience.to_string());
        put("validation_fraction", format!("{:?}", self.validation_fraction));
        put("pg_bins", self.pg_bins.to_string());
        put("unisamp_ratio", format!("{:?}", self.unisamp_ratio));
        put("synth_users", self.synth_users.to_string());
        put("synth_posts", self.synth_posts.to_string());
        put("synth_comments", self.synth_comments.to_string());
        out
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| PipelineError::Config("a seed is required (no implicit entropy)".into()))
    }

    fn path(&self, p: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
        p.clone()
            .ok_or_else(|| PipelineError::Config(format!("{key} is not set")))
    }

    pub fn out_dir(&self) -> Result<PathBuf> {
        self.path(&self.out_dir, "out_dir")
    }

    pub fn workload_dir(&self) -> Result<PathBuf> {
        match &self.workload_dir {
            Some(p) => Ok(p.clone()),
            None => Ok(self.out_dir()?.join("workload")),
        }
    }

    pub fn load_schema(&self) -> Result<Arc<Schema>> {
        let p = self.path(&self.schema, "schema")?;
        if !p.exists() {
            return Err(PipelineError::Config(format!("schema {} does not exist", p.display())));
        }
        Schema::load(&p).map(Arc::new).map_err(data)
    }

    pub fn workload_config(&self) -> Result<WorkloadConfig> {
        Ok(WorkloadConfig {
            kind: self.workload,
            seed: self.seed()?,
            dml_budget: if self.workload == WorkloadKind::Static { 0 } else { self.dml_budget },
            train_queries: self.train_queries,
            eval_queries: self.eval_queries,
            train_copies: self.train_copies,
            min_rho: self.min_rho,
            ..WorkloadConfig::default()
        })
    }

    pub fn replay_config(&self) -> ReplayConfig {
        ReplayConfig {
            bins: self.d_x,
            mode: self.bin_mode,
            ..ReplayConfig::default()
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            max_epochs: self.max_epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            warmup_steps: self.warmup_steps,
            patience: self.patience,
            validation_fraction: self.validation_fraction,
            seed: derive_seed(self.seed()?, 2),
        })
    }
}

/// Independent sub-seed for one purpose (`tag`) of a run.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(tag.wrapping_mul(0xBF58_476D_1CE4_E5B9))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(data)?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
}

/// Writes the synthetic schema to `schema` and its rows under `data_dir`.
pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let sc = SynthConfig {
        users: cfg.synth_users,
        posts: cfg.synth_posts,
        comments: cfg.synth_comments,
        seed: cfg.seed()?,
    };
    let schema_path = cfg.path(&cfg.schema, "schema")?;
    let data_dir = cfg.path(&cfg.data_dir, "data_dir")?;
    let (schema, rows) = synth::generate(&sc);
    let mut f = create(&schema_path)?;
    f.write_all(schema.to_toml_string().as_bytes()).map_err(data)?;
    f.flush().map_err(data)?;
    write_csv_dir(&schema, &rows, &data_dir).map_err(data)?;
    info!("wrote {} rows to {}", rows.iter().map(Vec::len).sum::<usize>(), data_dir.display());
    Ok(())
}

pub fn gen_workload(cfg: &RunConfig) -> Result<WorkloadScript> {
    let schema = cfg.load_schema()?;
    let data_dir = cfg.path(&cfg.data_dir, "data_dir")?;
    if !data_dir.is_dir() {
        return Err(PipelineError::Config(format!("data_dir {} does not exist", data_dir.display())));
    }
    let full = load_csv_dir(&schema, &data_dir).map_err(data)?;
    let script = generate_workload(&schema, &full, &cfg.workload_config()?).map_err(data)?;
    save_script(&cfg.workload_dir()?, &schema, &script).map_err(data)?;
    Ok(script)
}

fn load_workload(cfg: &RunConfig, schema: &Schema) -> Result<WorkloadScript> {
    let dir = cfg.workload_dir()?;
    if !dir.join("workload.jsonl").exists() {
        return Err(PipelineError::Config(format!(
            "no workload under {}; run gen-workload first",
            dir.display()
        )));
    }
    load_script(&dir, schema).map_err(data)
}

/// Collects training-part sub-queries as `(snapshot, query vector, label)`.
pub struct TrainingSink {
    featurizer: Featurizer,
    index: HashMap<u64, usize>,
    pub snapshots: Vec<(u64, Arc<DbStates>)>,
    pub samples: Vec<TrainingSample>,
}

impl TrainingSink {
    pub fn new(featurizer: Featurizer) -> Self {
        Self {
            featurizer,
            index: HashMap::new(),
            snapshots: Vec::new(),
            samples: Vec::new(),
        }
    }

    pub fn sample_set(&self) -> SampleSet {
        SampleSet {
            states: self.snapshots.iter().map(|(_, s)| s.matrix()).collect(),
            samples: self.samples.clone(),
        }
    }
}

impl ReplaySink for TrainingSink {
    fn on_pack(&mut self, ev: &PackEvent<'_>) -> std::result::Result<(), WorkloadError> {
        if ev.phase != Phase::Training {
            return Ok(());
        }
        let next = self.snapshots.len();
        let snapshot = *self.index.entry(ev.snapshot_id).or_insert(next);
        if snapshot == next {
            self.snapshots.push((ev.snapshot_id, Arc::clone(&ev.states)));
        }
        for (q, &card) in ev.pack.sub_queries.iter().zip(&ev.cards) {
            let f = self
                .featurizer
                .featurize(q)
                .map_err(|e| WorkloadError::Script(e.to_string()))?;
            self.samples.push(TrainingSample {
                snapshot,
                query: f.full(),
                label: log_label(card),
            });
        }
        Ok(())
    }
}

fn samples_path(out: &Path) -> PathBuf {
    out.join("train").join("samples.txt")
}

fn pool_path(out: &Path) -> PathBuf {
    out.join("train").join("states.pool")
}

/// Replays the workload and stores the training samples and their
/// DB-state snapshots under `<out_dir>/train/`.
pub fn replay_train(cfg: &RunConfig) -> Result<SampleSet> {
    let schema = cfg.load_schema()?;
    let script = load_workload(cfg, &schema)?;
    let mut sink = TrainingSink::new(Featurizer::new(Arc::clone(&schema), cfg.join_variant));
    replay(Arc::clone(&schema), &script, &cfg.replay_config(), &mut sink).map_err(data)?;
    let Some((_, layout)) = sink.snapshots.first() else {
        return Err(PipelineError::Data("the training part contains no queries".into()));
    };
    let out = cfg.out_dir()?;
    let mut w = create(&pool_path(&out))?;
    let refs: Vec<(u64, &DbStates)> = sink.snapshots.iter().map(|(i, s)| (*i, s.as_ref())).collect();
    write_pool(&mut w, layout, &refs).map_err(data)?;
    w.flush().map_err(data)?;
    let mut w = create(&samples_path(&out))?;
    write_samples(&mut w, &sink.samples).map_err(data)?;
    w.flush().map_err(data)?;
    info!(
        "{} training samples over {} snapshots",
        sink.samples.len(),
        sink.snapshots.len()
    );
    Ok(sink.sample_set())
}

pub fn load_samples(cfg: &RunConfig) -> Result<SampleSet> {
    let out = cfg.out_dir()?;
    let pool = read_pool(open(&pool_path(&out))?).map_err(data)?;
    let samples = read_samples(open(&samples_path(&out))?).map_err(PipelineError::Data)?;
    if let Some(s) = samples.iter().find(|s| s.snapshot >= pool.len()) {
        return Err(PipelineError::Data(format!("sample refers to missing snapshot {}", s.snapshot)));
    }
    Ok(SampleSet {
        states: pool.iter().map(|(_, s)| s.matrix()).collect(),
        samples,
    })
}

fn checkpoint_path(out: &Path, model: ModelKind) -> PathBuf {
    out.join("model").join(format!("{}.ckpt", model.name()))
}

fn alece_config(cfg: &RunConfig, schema: &Schema) -> AleceConfig {
    let f = Featurizer::new(Arc::new(schema.clone()), cfg.join_variant);
    AleceConfig {
        attrs: schema.num_attrs(),
        d_x: cfg.d_x,
        d_q: f.dim(),
        n_enc: cfg.n_enc,
        n_ana: cfg.n_ana,
        heads: cfg.heads,
    }
}

fn fit_and_save<L: Learner>(mut model: L, set: &SampleSet, cfg: &RunConfig, kind: ModelKind) -> Result<TrainOutcome> {
    let tc = cfg.train_config()?;
    let outcome = train(&mut model, set, &tc).map_err(data)?;
    let out = cfg.out_dir()?;
    let mut meta = model.manifest();
    meta.push(("join_variant".into(), cfg.join_variant.name().into()));
    meta.push(("bin_mode".into(), cfg.bin_mode.name().into()));
    let mut w = create(&checkpoint_path(&out, kind))?;
    write_checkpoint(&mut w, &meta, model.params()).map_err(data)?;
    w.flush().map_err(data)?;
    let mut h = create(&out.join("model").join(format!("{}_history.csv", kind.name())))?;
    write_history(&mut h, &outcome.history).map_err(data)?;
    h.flush().map_err(data)?;
    Ok(outcome)
}

/// Trains `cfg.model` on the stored samples and writes its checkpoint
/// and per-epoch history under `<out_dir>/model/`.
pub fn train_model(cfg: &RunConfig) -> Result<TrainOutcome> {
    let schema = cfg.load_schema()?;
    let set = load_samples(cfg)?;
    if set.is_empty() {
        return Err(PipelineError::Data("no training samples".into()));
    }
    let d_q = set.samples[0].query.len();
    let seed = derive_seed(cfg.seed()?, 1);
    match cfg.model {
        ModelKind::Alece => {
            let ac = alece_config(cfg, &schema);
            if ac.d_q != d_q || set.states[0].cols() != cfg.d_x {
                return Err(PipelineError::Config(
                    "stored samples do not match the configured features; rerun replay-train".into(),
                ));
            }
            fit_and_save(AleceModel::new(ac, seed), &set, cfg, ModelKind::Alece)
        }
        ModelKind::Mlp => {
            let m = MlpModel::new(schema.num_attrs(), set.states[0].cols(), d_q, seed);
            fit_and_save(m, &set, cfg, ModelKind::Mlp)
        }
    }
}

fn load_learned(cfg: &RunConfig, schema: &Arc<Schema>, kind: ModelKind) -> Result<Box<dyn Estimator>> {
    let path = checkpoint_path(&cfg.out_dir()?, kind);
    if !path.exists() {
        return Err(PipelineError::Config(format!(
            "no checkpoint at {}; run train with model = {:?}",
            path.display(),
            kind.name()
        )));
    }
    let ckpt = read_checkpoint(&mut open(&path)?).map_err(data)?;
    let check = |key: &str, want: String| -> Result<()> {
        match ckpt.meta(key) {
            Some(v) if v == want => Ok(()),
            other => Err(PipelineError::Config(format!(
                "checkpoint {key} is {other:?}, configuration says {want}"
            ))),
        }
    };
    check("join_variant", cfg.join_variant.name().into())?;
    check("bin_mode", cfg.bin_mode.name().into())?;
    check("d_x", cfg.d_x.to_string())?;
    let featurizer = Featurizer::new(Arc::clone(schema), cfg.join_variant);
    match kind {
        ModelKind::Alece => {
            let ac = AleceModel::from_manifest(&ckpt.metadata).map_err(PipelineError::Data)?;
            let mut m = AleceModel::new(ac, 0);
            m.params_mut().copy_from(&ckpt.params);
            Ok(Box::new(LearnedEstimator::new(m, featurizer)))
        }
        ModelKind::Mlp => {
            let get = |k: &str| -> Result<usize> {
                ckpt.meta(k)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| PipelineError::Data(format!("checkpoint lacks {k}")))
            };
            let mut m = MlpModel::new(get("T")?, get("d_x")?, get("d_q")?, 0);
            m.params_mut().copy_from(&ckpt.params);
            Ok(Box::new(LearnedEstimator::new(m, featurizer)))
        }
    }
}

fn build_estimator(cfg: &RunConfig, schema: &Arc<Schema>, kind: EstimatorKind) -> Result<Box<dyn Estimator>> {
    Ok(match kind {
        EstimatorKind::Alece => load_learned(cfg, schema, ModelKind::Alece)?,
        EstimatorKind::Mlp => load_learned(cfg, schema, ModelKind::Mlp)?,
        EstimatorKind::Pg => Box::new(PgEstimator::new(cfg.pg_bins)),
        EstimatorKind::UniSamp => Box::new(UniSampEstimator::new(cfg.unisamp_ratio, derive_seed(cfg.seed()?, 3))),
        EstimatorKind::Optimal => Box::new(OptimalEstimator),
    })
}

/// Replays the workload once, estimating every evaluation-part sub-query
/// with each of `kinds`.
pub fn run_estimators(cfg: &RunConfig, kinds: &[EstimatorKind]) -> Result<Vec<EstimatorReport>> {
    let schema = cfg.load_schema()?;
    let script = load_workload(cfg, &schema)?;
    let ests = kinds
        .iter()
        .map(|&k| build_estimator(cfg, &schema, k))
        .collect::<Result<Vec<_>>>()?;
    let mut sink = EvaluationSink::new(ests);
    replay(Arc::clone(&schema), &script, &cfg.replay_config(), &mut sink).map_err(data)?;
    Ok(sink.reports)
}

/// Writes only the estimate files, under `<out_dir>/estimates/<estimator>/`.
pub fn estimate(cfg: &RunConfig, kinds: &[EstimatorKind]) -> Result<Vec<EstimatorReport>> {
    let reports = run_estimators(cfg, kinds)?;
    let out = cfg.out_dir()?.join("estimates");
    for r in &reports {
        write_estimate_files(r, &out.join(&r.estimator)).map_err(data)?;
    }
    Ok(reports)
}

/// Writes per-estimator reports and estimate files under
/// `<out_dir>/eval/<estimator>/`. Timings go to `summary.txt` only, so
/// every other output is reproducible byte for byte.
pub fn evaluate(cfg: &RunConfig, kinds: &[EstimatorKind]) -> Result<Vec<EstimatorReport>> {
    let reports = run_estimators(cfg, kinds)?;
    let out = cfg.out_dir()?.join("eval");
    for r in &reports {
        let dir = out.join(&r.estimator);
        write_estimate_files(r, &dir).map_err(data)?;
        let mut w = create(&dir.join("report.csv"))?;
        write_report_csv(&mut w, r).map_err(data)?;
        w.flush().map_err(data)?;
        let mut w = create(&dir.join("quantiles.csv"))?;
        write_quantiles_csv(&mut w, std::slice::from_ref(r)).map_err(data)?;
        w.flush().map_err(data)?;
        let mut w = create(&dir.join("summary.txt"))?;
        write_summary(&mut w, std::slice::from_ref(r)).map_err(data)?;
        w.flush().map_err(data)?;
    }
    Ok(reports)
}

fn read_report_csv(path: &Path, estimator: &str) -> Result<EstimatorReport> {
    let mut rdr = csv::Reader::from_reader(open(path)?);
    let mut rep = EstimatorReport::new(estimator);
    for rec in rdr.records() {
        let rec = rec.map_err(data)?;
        let field = |i: usize| rec.get(i).ok_or_else(|| PipelineError::Data(format!("{}: short row", path.display())));
        let num = |i: usize| -> Result<f64> {
            field(i)?
                .parse()
                .map_err(|_| PipelineError::Data(format!("{}: bad number", path.display())))
        };
        rep.results.push(SubQueryResult {
            ordinal: num(0)? as usize,
            kind: match field(1)? {
                "single" => SubQueryKind::Single,
                "join" => SubQueryKind::Join,
                k => return Err(PipelineError::Data(format!("unknown kind {k}"))),
            },
            sql: String::new(),
            true_card: num(2)? as u64,
            estimate: num(3)?,
            q_error: num(4)?,
        });
    }
    Ok(rep)
}

/// Gathers every `<out_dir>/eval/*/report.csv` into one quantile table
/// (`<out_dir>/eval/quantiles.csv`) and returns the summary text.
pub fn report(cfg: &RunConfig) -> Result<String> {
    let eval = cfg.out_dir()?.join("eval");
    let mut names: Vec<String> = std::fs::read_dir(&eval)
        .map_err(|e| PipelineError::Data(format!("{}: {e}; run evaluate first", eval.display())))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join("report.csv").exists())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(PipelineError::Data(format!("no reports under {}", eval.display())));
    }
    let reports = names
        .iter()
        .map(|n| read_report_csv(&eval.join(n).join("report.csv"), n))
        .collect::<Result<Vec<_>>>()?;
    let mut w = create(&eval.join("quantiles.csv"))?;
    write_quantiles_csv(&mut w, &reports).map_err(data)?;
    w.flush().map_err(data)?;
    let mut text = Vec::new();
    write_summary(&mut text, &reports).map_err(data)?;
    Ok(String::from_utf8_lossy(&text).into_owned())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckLine {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub const FD_STEP: f64 = 1e-6;
pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
pub const MODEL_TOLERANCE: f64 = 1e-4;

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .expect("shape")
}

/// Finite-difference check of the full attention model at tiny dimensions
/// (`T=3, d_x=4, d_q=8, h=2`, one block each) for one seed.
pub fn model_gradcheck(seed: u64) -> std::result::Result<f64, alece_autodiff::AutodiffError> {
    let cfg = AleceConfig {
        attrs: 3,
        d_x: 4,
        d_q: 8,
        n_enc: 1,
        n_ana: 1,
        heads: 2,
    };
    let model = AleceModel::new(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 7));
    let states = Tensor::new(3, 4, (0..12).map(|_| rng.gen_range(0.0..1.0)).collect())?;
    let queries = random_tensor(&mut rng, 4, 8);
    let labels: Vec<f64> = (0..4).map(|_| rng.gen_range(0.5..6.0)).collect();
    let total: f64 = labels.iter().sum();
    let weights: Vec<f64> = labels.iter().map(|l| l / total).collect();
    let report = check_param_gradients(model.params(), FD_STEP, |tape, bound| {
        let pred = model.forward(tape, bound, &states, &queries)?;
        tape.mwse(pred, &labels, &weights, labels.len())
    })?;
    Ok(report.max_rel_error)
}

/// Per-primitive checks plus the full model over `seeds`.
pub fn gradcheck_suite(seeds: u64) -> std::result::Result<Vec<CheckLine>, alece_autodiff::AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = random_tensor(&mut rng, 3, 4);
    let b = random_tensor(&mut rng, 4, 2);
    let k = random_tensor(&mut rng, 5, 4);
    let g = random_tensor(&mut rng, 1, 4);
    let bias = random_tensor(&mut rng, 1, 4);
    let proj = |t: &mut Tape, v, seed: u64| {
        let [r, c] = t.value(v).shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        t.sum_weighted(v, random_tensor(&mut rng, r, c))
    };
    let mut lines = Vec::new();
    let mut prim = |name: &str, inputs: Vec<Tensor>, f: &dyn Fn(&mut Tape, &[alece_autodiff::Var]) -> alece_autodiff::Result<alece_autodiff::Var>| {
        check_input_gradients(&inputs, FD_STEP, f).map(|r| {
            lines.push(CheckLine {
                name: name.into(),
                max_rel_error: r.max_rel_error,
                tolerance: PRIMITIVE_TOLERANCE,
            })
        })
    };
    prim("matmul", vec![a.clone(), b.clone()], &|t, v| {
        let o = t.matmul(v[0], v[1])?;
        proj(t, o, 1)
    })?;
    prim("matmul_nt", vec![a.clone(), k.clone()], &|t, v| {
        let o = t.matmul_nt(v[0], v[1])?;
        proj(t, o, 2)
    })?;
    prim("softmax_rows", vec![a.clone()], &|t, v| {
        let o = t.softmax_rows(v[0])?;
        proj(t, o, 3)
    })?;
    prim("layer_norm_rows", vec![a.clone(), g.clone(), bias.clone()], &|t, v| {
        let o = t.layer_norm_rows(v[0], v[1], v[2], LAYER_NORM_EPS)?;
        proj(t, o, 4)
    })?;
    prim("relu", vec![a.clone()], &|t, v| {
        let o = t.relu(v[0])?;
        proj(t, o, 5)
    })?;
    prim("attention", vec![a.clone(), k.clone(), random_tensor(&mut ChaCha8Rng::seed_from_u64(9), 5, 3)], &|t, v| {
        let o = crate::model::attention(t, v[0], v[1], v[2])?;
        proj(t, o, 6)
    })?;
    let mut worst: f64 = 0.0;
    for s in 0..seeds {
        worst = worst.max(model_gradcheck(s)?);
    }
    lines.push(CheckLine {
        name: format!("alece model ({seeds} seeds)"),
        max_rel_error: worst,
        tolerance: MODEL_TOLERANCE,
    });
    Ok(lines)
}
