//! Mini-batch Adam training with a weighted log-space loss, a held-out
//! validation split, best-parameter tracking and early stopping.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use alece_autodiff::{AdamConfig, AdamState, Gradients, ParamStore, Result, Tape, Tensor};
use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::model::Learner;

/// One `(query, states, label)` triple; `snapshot` indexes [`SampleSet::states`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub snapshot: usize,
    pub query: Vec<f64>,
    /// `ln(max(card, 1))`.
    pub label: f64,
}

pub fn log_label(card: u64) -> f64 {
    (card.max(1) as f64).ln()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleSet {
    /// State matrices (`T x d_x`), one per distinct snapshot.
    pub states: Vec<Tensor>,
    pub samples: Vec<TrainingSample>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Optimizer steps over which the step size ramps linearly up to
    /// `learning_rate`; 0 disables the ramp.
    pub warmup_steps: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 200,
            batch_size: 128,
            learning_rate: 0.01,
            warmup_steps: 100,
            patience: 10,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochStats>,
    /// Epoch whose parameters were kept, if any epoch ran.
    pub best_epoch: Option<usize>,
    pub best_val_loss: f64,
}

/// `w_i = label_i / Σ label_j`; uniform when every label is zero.
pub fn compute_weights(labels: &[f64]) -> Vec<f64> {
    let total: f64 = labels.iter().sum();
    if total > 0.0 {
        labels.iter().map(|l| l / total).collect()
    } else {
        vec![1.0 / labels.len() as f64; labels.len()]
    }
}

/// Starts the output bias at the weighted mean training label, so the first
/// optimizer steps are not spent shifting every prediction by the same
/// amount. With large learning rates that shift otherwise drags the whole
/// representation towards a constant and training stalls at the mean.
pub fn init_output_bias<L: Learner>(model: &mut L, set: &SampleSet, train_idx: &[usize]) {
    let Some(id) = model.output_bias() else { return };
    if train_idx.is_empty() {
        return;
    }
    let labels: Vec<f64> = train_idx.iter().map(|&i| set.samples[i].label).collect();
    let mean: f64 = labels.iter().zip(compute_weights(&labels)).map(|(l, w)| l * w).sum();
    model.params_mut().get_mut(id).data_mut()[0] = mean;
}

/// `(1/B) Σ w_i (p_i - l_i)^2`, evaluated directly.
pub fn mwse(preds: &[f64], labels: &[f64], weights: &[f64]) -> f64 {
    assert!(preds.len() == labels.len() && labels.len() == weights.len());
    let b = preds.len() as f64;
    preds
        .iter()
        .zip(labels)
        .zip(weights)
        .map(|((p, l), w)| w * (p - l) * (p - l))
        .sum::<f64>()
        / b
}

/// Early-stopping bookkeeping: improvement is a strictly smaller
/// validation loss.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            since_best: 0,
        }
    }

    /// Records a validation loss; returns true if it is a new best.
    pub fn observe(&mut self, val: f64) -> bool {
        if val < self.best {
            self.best = val;
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

/// Seeded sample-level train/validation split. With a single sample both
/// parts are that sample.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    if n < 2 {
        return (idx.clone(), idx);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_val = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

/// Groups sample indices by snapshot, preserving first-seen order inside
/// each group and ordering groups by snapshot id.
fn by_snapshot(set: &SampleSet, members: &[usize]) -> Vec<(usize, Vec<usize>)> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (pos, &i) in members.iter().enumerate() {
        groups.entry(set.samples[i].snapshot).or_default().push(pos);
    }
    groups.into_iter().collect()
}

fn stack_queries(set: &SampleSet, members: &[usize], positions: &[usize]) -> Result<Tensor> {
    let d = set.samples[members[0]].query.len();
    let mut data = Vec::with_capacity(positions.len() * d);
    for &p in positions {
        data.extend_from_slice(&set.samples[members[p]].query);
    }
    Tensor::new(positions.len(), d, data)
}

/// Loss and parameter gradients of one batch. Samples sharing a snapshot
/// are evaluated on one tape so the encoder runs once per snapshot.
pub fn batch_gradients<L: Learner>(
    model: &L,
    set: &SampleSet,
    members: &[usize],
) -> Result<(f64, Gradients)> {
    let labels: Vec<f64> = members.iter().map(|&i| set.samples[i].label).collect();
    let weights = compute_weights(&labels);
    let groups = by_snapshot(set, members);
    let parts: Vec<Result<(f64, Gradients)>> = groups
        .par_iter()
        .map(|(snap, positions)| {
            let mut tape = Tape::new();
            let bound = tape.bind(model.params())?;
            let q = stack_queries(set, members, positions)?;
            let pred = model.forward(&mut tape, &bound, &set.states[*snap], &q)?;
            let l: Vec<f64> = positions.iter().map(|&p| labels[p]).collect();
            let w: Vec<f64> = positions.iter().map(|&p| weights[p]).collect();
            let loss = tape.mwse(pred, &l, &w, members.len())?;
            let value = tape.value(loss).data()[0];
            let grads = tape.backward(loss)?.param_gradients(&tape, model.params());
            Ok((value, grads))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = Gradients::zeros_like(model.params());
    for part in parts {
        let (v, g) = part?;
        total += v;
        grads.accumulate(&g);
    }
    Ok((total, grads))
}

/// Predicted log-cardinalities for `members`, in order.
pub fn predict<L: Learner>(model: &L, set: &SampleSet, members: &[usize]) -> Result<Vec<f64>> {
    let groups = by_snapshot(set, members);
    let parts: Vec<Result<(Vec<usize>, Vec<f64>)>> = groups
        .par_iter()
        .map(|(snap, positions)| {
            let q = stack_queries(set, members, positions)?;
            Ok((positions.clone(), model.predict_log(&set.states[*snap], &q)?))
        })
        .collect();
    let mut out = vec![0.0; members.len()];
    for part in parts {
        let (positions, preds) = part?;
        for (p, v) in positions.into_iter().zip(preds) {
            out[p] = v;
        }
    }
    Ok(out)
}

/// Validation loss: the whole set scored as a single batch.
pub fn evaluate_loss<L: Learner>(model: &L, set: &SampleSet, members: &[usize]) -> Result<f64> {
    if members.is_empty() {
        return Ok(0.0);
    }
    let preds = predict(model, set, members)?;
    let labels: Vec<f64> = members.iter().map(|&i| set.samples[i].label).collect();
    Ok(mwse(&preds, &labels, &compute_weights(&labels)))
}

/// Step size of optimizer step `step` (0-based): a linear ramp over the
/// first `warmup_steps` steps, then `learning_rate`. Post-norm attention
/// stacks driven at full step size from the first update collapse every
/// DB-state row onto one representation, after which training stalls at the
/// mean label.
pub fn step_size(cfg: &TrainConfig, step: u64) -> f64 {
    let w = cfg.warmup_steps as u64;
    if step >= w {
        cfg.learning_rate
    } else {
        cfg.learning_rate * (step + 1) as f64 / (w + 1) as f64
    }
}

/// One pass over `train` in a freshly shuffled order; returns the
/// size-weighted mean batch loss.
pub fn train_epoch<L: Learner>(
    model: &mut L,
    adam: &mut AdamState,
    set: &SampleSet,
    train: &[usize],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    assert!(cfg.batch_size >= 1, "batch size must be positive");
    let mut order = train.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(epoch as u64 + 1);
    order.shuffle(&mut rng);
    let mut weighted = 0.0;
    for batch in order.chunks(cfg.batch_size) {
        let (loss, grads) = batch_gradients(model, set, batch)?;
        let adam_cfg = AdamConfig {
            learning_rate: step_size(cfg, adam.steps()),
            ..AdamConfig::default()
        };
        adam.step(model.params_mut(), &grads, &adam_cfg)?;
        weighted += loss * batch.len() as f64;
    }
    Ok(if order.is_empty() {
        0.0
    } else {
        weighted / order.len() as f64
    })
}

/// Trains `model` in place; on return it holds the parameters of the epoch
/// with the lowest validation loss (or its initial parameters if no epoch ran).
pub fn train<L: Learner>(model: &mut L, set: &SampleSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let (train_idx, val_idx) = split_indices(set.len(), cfg.validation_fraction, cfg.seed);
    train_split(model, set, &train_idx, &val_idx, cfg)
}

pub fn train_split<L: Learner>(
    model: &mut L,
    set: &SampleSet,
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if cfg.max_epochs > 0 {
        init_output_bias(model, set, train_idx);
    }
    let mut adam = AdamState::new(model.params());
    let mut best: ParamStore = model.params().clone();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = Vec::new();
    let mut best_epoch = None;
    for epoch in 0..cfg.max_epochs {
        let train_loss = train_epoch(model, &mut adam, set, train_idx, cfg, epoch)?;
        let val_loss = evaluate_loss(model, set, val_idx)?;
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });
        if stopper.observe(val_loss) {
            best.copy_from(model.params());
            best_epoch = Some(epoch);
        }
        debug!("epoch {epoch}: train {train_loss:.6e} val {val_loss:.6e}");
        if stopper.should_stop() {
            info!("early stop after epoch {epoch}");
            break;
        }
    }
    model.params_mut().copy_from(&best);
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_loss: stopper.best(),
    })
}

pub fn write_history<W: Write>(w: &mut W, history: &[EpochStats]) -> std::io::Result<()> {
    writeln!(w, "epoch,train_loss,val_loss")?;
    for h in history {
        writeln!(w, "{},{},{}", h.epoch, h.train_loss, h.val_loss)?;
    }
    Ok(())
}

/// Writes one sample per line: `<snapshot> <label> <q_1> ... <q_d>`.
pub fn write_samples<W: Write>(w: &mut W, samples: &[TrainingSample]) -> std::io::Result<()> {
    for s in samples {
        write!(w, "{} {}", s.snapshot, s.label)?;
        for v in &s.query {
            write!(w, " {v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_samples<R: BufRead>(r: R) -> std::result::Result<Vec<TrainingSample>, String> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| e.to_string())?;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let bad = || format!("sample line {}: malformed", n + 1);
        let snapshot = it.next().and_then(|t| t.parse().ok()).ok_or_else(bad)?;
        let label = it.next().and_then(|t| t.parse().ok()).ok_or_else(bad)?;
        let query = it
            .map(|t| t.parse::<f64>().map_err(|_| bad()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        out.push(TrainingSample {
            snapshot,
            query,
            label,
        });
    }
    Ok(out)
}
