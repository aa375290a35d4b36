//! The attention estimator: a self-attention encoder over the DB-state
//! histograms, a cross-attention analyzer driven by the query vector, and a
//! linear regression head producing a log-cardinality.

use alece_autodiff::{Bound, ParamId, ParamStore, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Anything the trainer can fit: maps a state matrix and a stack of query
/// vectors to one predicted log-cardinality per query (`n x 1`).
pub trait Learner: Send + Sync {
    fn name(&self) -> &'static str;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn forward(&self, tape: &mut Tape, bound: &Bound, states: &Tensor, queries: &Tensor) -> Result<Var>;
    /// Shape description stored alongside checkpoints.
    fn manifest(&self) -> Vec<(String, String)>;
    /// The `1 x 1` bias of the final regression layer, if the model has one.
    fn output_bias(&self) -> Option<ParamId> {
        None
    }

    /// Predicted log-cardinalities without keeping the tape around.
    fn predict_log(&self, states: &Tensor, queries: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = tape.bind(self.params())?;
        let out = self.forward(&mut tape, &bound, states, queries)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Cardinality estimates, `exp` of the log prediction clamped to at least 1.
    fn estimate(&self, states: &Tensor, queries: &Tensor) -> Result<Vec<f64>> {
        Ok(self
            .predict_log(states, queries)?
            .into_iter()
            .map(log_to_card)
            .collect())
    }
}

pub fn log_to_card(log_card: f64) -> f64 {
    log_card.exp().max(1.0)
}

fn uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Tensor::new(fan_in, fan_out, data).expect("init shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AleceConfig {
    /// `T`, number of DB-state rows.
    pub attrs: usize,
    /// `d_x`, histogram width.
    pub d_x: usize,
    /// `d_q`, query vector width.
    pub d_q: usize,
    pub n_enc: usize,
    pub n_ana: usize,
    pub heads: usize,
}

impl AleceConfig {
    pub fn head_width(&self, d: usize) -> usize {
        (d / self.heads).max(1)
    }
}

#[derive(Clone, Debug)]
struct Attention {
    wq: Vec<ParamId>,
    wk: Vec<ParamId>,
    wv: Vec<ParamId>,
    wm: ParamId,
    head_width: usize,
}

#[derive(Clone, Debug)]
struct FeedForward {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct Block {
    attn: Attention,
    ln1: (ParamId, ParamId),
    ff: FeedForward,
    ln2: (ParamId, ParamId),
}

impl Block {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize, heads: usize) -> Self {
        let dm = (d / heads).max(1);
        let mut proj = |kind: &str, rng: &mut ChaCha8Rng| -> Vec<ParamId> {
            (0..heads)
                .map(|h| store.add(format!("{prefix}.attn.{kind}{h}"), uniform(rng, d, dm)))
                .collect()
        };
        let wq = proj("wq", rng);
        let wk = proj("wk", rng);
        let wv = proj("wv", rng);
        let wm = store.add(format!("{prefix}.attn.wm"), uniform(rng, heads * dm, d));
        let ln1 = (
            store.add(format!("{prefix}.ln1.gain"), Tensor::filled(1, d, 1.0)),
            store.add(format!("{prefix}.ln1.bias"), Tensor::zeros(1, d)),
        );
        let ff = FeedForward {
            w1: store.add(format!("{prefix}.ff.w1"), uniform(rng, d, 2 * d)),
            b1: store.add(format!("{prefix}.ff.b1"), Tensor::zeros(1, 2 * d)),
            w2: store.add(format!("{prefix}.ff.w2"), uniform(rng, 2 * d, d)),
            b2: store.add(format!("{prefix}.ff.b2"), Tensor::zeros(1, d)),
        };
        let ln2 = (
            store.add(format!("{prefix}.ln2.gain"), Tensor::filled(1, d, 1.0)),
            store.add(format!("{prefix}.ln2.bias"), Tensor::zeros(1, d)),
        );
        Self {
            attn: Attention {
                wq,
                wk,
                wv,
                wm,
                head_width: dm,
            },
            ln1,
            ff,
            ln2,
        }
    }

    /// `LN(y + FF(LN(y + MHA(y, kv, kv))))`.
    fn apply(&self, tape: &mut Tape, p: &Bound, y: Var, kv: Var) -> Result<Var> {
        let a = multi_head(tape, p, &self.attn, y, kv, kv)?;
        let r = tape.add(y, a)?;
        let y1 = tape.layer_norm_rows(r, p.var(self.ln1.0), p.var(self.ln1.1), LAYER_NORM_EPS)?;
        let h = tape.linear(y1, p.var(self.ff.w1), p.var(self.ff.b1))?;
        let h = tape.relu(h)?;
        let f = tape.linear(h, p.var(self.ff.w2), p.var(self.ff.b2))?;
        let r = tape.add(y1, f)?;
        tape.layer_norm_rows(r, p.var(self.ln2.0), p.var(self.ln2.1), LAYER_NORM_EPS)
    }
}

/// `softmax(q kᵀ / sqrt(d_k)) v`.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let dk = tape.value(k).cols() as f64;
    let logits = tape.matmul_nt(q, k)?;
    let logits = tape.scale(logits, 1.0 / dk.sqrt())?;
    let w = tape.softmax_rows(logits)?;
    tape.matmul(w, v)
}

fn multi_head(tape: &mut Tape, p: &Bound, a: &Attention, q: Var, k: Var, v: Var) -> Result<Var> {
    debug_assert!(a.head_width >= 1);
    let mut heads = Vec::with_capacity(a.wq.len());
    for h in 0..a.wq.len() {
        let qh = tape.matmul(q, p.var(a.wq[h]))?;
        let kh = tape.matmul(k, p.var(a.wk[h]))?;
        let vh = tape.matmul(v, p.var(a.wv[h]))?;
        heads.push(attention(tape, qh, kh, vh)?);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    tape.matmul(cat, p.var(a.wm))
}

#[derive(Clone, Debug)]
pub struct AleceModel {
    cfg: AleceConfig,
    store: ParamStore,
    encoder: Vec<Block>,
    proj: (ParamId, ParamId),
    analyzer: Vec<Block>,
    head: (ParamId, ParamId),
}

impl AleceModel {
    pub fn new(cfg: AleceConfig, seed: u64) -> Self {
        assert!(cfg.heads >= 1 && cfg.d_x >= 2 && cfg.d_q >= 2 && cfg.attrs >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = (0..cfg.n_enc)
            .map(|i| Block::new(&mut store, &mut rng, &format!("enc{i}"), cfg.d_x, cfg.heads))
            .collect();
        let proj = (
            store.add("proj.w", uniform(&mut rng, cfg.d_x, cfg.d_q)),
            store.add("proj.b", Tensor::zeros(1, cfg.d_q)),
        );
        let analyzer = (0..cfg.n_ana)
            .map(|i| Block::new(&mut store, &mut rng, &format!("ana{i}"), cfg.d_q, cfg.heads))
            .collect();
        let head = (
            store.add("head.w", uniform(&mut rng, cfg.d_q, 1)),
            store.add("head.b", Tensor::zeros(1, 1)),
        );
        Self {
            cfg,
            store,
            encoder,
            proj,
            analyzer,
            head,
        }
    }

    pub fn config(&self) -> AleceConfig {
        self.cfg
    }

    /// `T x d_q` representation of the DB states.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let mut z = x;
        for b in &self.encoder {
            z = b.apply(tape, p, z, z)?;
        }
        tape.linear(z, p.var(self.proj.0), p.var(self.proj.1))
    }

    /// One log-cardinality per row of `q` (`n x d_q`), attending over `z`.
    pub fn analyze(&self, tape: &mut Tape, p: &Bound, z: Var, q: Var) -> Result<Var> {
        let mut y = q;
        for b in &self.analyzer {
            y = b.apply(tape, p, y, z)?;
        }
        tape.linear(y, p.var(self.head.0), p.var(self.head.1))
    }

    pub fn from_manifest(meta: &[(String, String)]) -> std::result::Result<AleceConfig, String> {
        let get = |k: &str| -> std::result::Result<usize, String> {
            meta.iter()
                .find(|(key, _)| key == k)
                .ok_or_else(|| format!("checkpoint lacks {k}"))?
                .1
                .parse()
                .map_err(|_| format!("checkpoint field {k} is not an integer"))
        };
        Ok(AleceConfig {
            attrs: get("T")?,
            d_x: get("d_x")?,
            d_q: get("d_q")?,
            n_enc: get("n_enc")?,
            n_ana: get("n_ana")?,
            heads: get("h")?,
        })
    }
}

impl Learner for AleceModel {
    fn name(&self) -> &'static str {
        "alece"
    }

    fn output_bias(&self) -> Option<ParamId> {
        Some(self.head.1)
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(&self, tape: &mut Tape, bound: &Bound, states: &Tensor, queries: &Tensor) -> Result<Var> {
        let x = tape.constant(states.clone())?;
        let q = tape.constant(queries.clone())?;
        let z = self.encode(tape, bound, x)?;
        self.analyze(tape, bound, z, q)
    }

    fn manifest(&self) -> Vec<(String, String)> {
        let c = self.cfg;
        [
            ("model", "alece".to_string()),
            ("T", c.attrs.to_string()),
            ("d_x", c.d_x.to_string()),
            ("d_q", c.d_q.to_string()),
            ("n_enc", c.n_enc.to_string()),
            ("n_ana", c.n_ana.to_string()),
            ("h", c.heads.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Flattened-states multilayer perceptron baseline.
#[derive(Clone, Debug)]
pub struct MlpModel {
    attrs: usize,
    d_x: usize,
    d_q: usize,
    store: ParamStore,
    layers: Vec<(ParamId, ParamId)>,
}

pub const MLP_HIDDEN: [usize; 3] = [256, 256, 256];

impl MlpModel {
    pub fn new(attrs: usize, d_x: usize, d_q: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut widths = vec![attrs * d_x + d_q];
        widths.extend(MLP_HIDDEN);
        widths.push(1);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                (
                    store.add(format!("mlp{i}.w"), uniform(&mut rng, w[0], w[1])),
                    store.add(format!("mlp{i}.b"), Tensor::zeros(1, w[1])),
                )
            })
            .collect();
        Self {
            attrs,
            d_x,
            d_q,
            store,
            layers,
        }
    }

    pub fn input_width(&self) -> usize {
        self.attrs * self.d_x + self.d_q
    }
}

impl Learner for MlpModel {
    fn name(&self) -> &'static str {
        "mlp"
    }

    fn output_bias(&self) -> Option<ParamId> {
        self.layers.last().map(|l| l.1)
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(&self, tape: &mut Tape, bound: &Bound, states: &Tensor, queries: &Tensor) -> Result<Var> {
        let n = queries.rows();
        let w = self.input_width();
        let mut data = Vec::with_capacity(n * w);
        for r in 0..n {
            data.extend_from_slice(states.data());
            data.extend_from_slice(queries.row(r));
        }
        let mut h = tape.constant(Tensor::new(n, w, data)?)?;
        for (i, (wi, bi)) in self.layers.iter().enumerate() {
            h = tape.linear(h, bound.var(*wi), bound.var(*bi))?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    fn manifest(&self) -> Vec<(String, String)> {
        vec![
            ("model".into(), "mlp".into()),
            ("T".into(), self.attrs.to_string()),
            ("d_x".into(), self.d_x.to_string()),
            ("d_q".into(), self.d_q.to_string()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> AleceConfig {
        AleceConfig {
            attrs: 3,
            d_x: 4,
            d_q: 8,
            n_enc: 1,
            n_ana: 1,
            heads: 2,
        }
    }

    #[test]
    fn zero_logits_average_the_values() {
        let mut t = Tape::new();
        let q = t.constant(Tensor::zeros(2, 3)).unwrap();
        let k = t.constant(Tensor::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap()).unwrap();
        let v = t.constant(Tensor::from_rows(&[[1.0, 0.0], [3.0, 4.0]]).unwrap()).unwrap();
        let o = attention(&mut t, q, k, v).unwrap();
        assert_eq!(t.value(o).row(0), &[2.0, 2.0]);
        assert_eq!(t.value(o).row(1), &[2.0, 2.0]);
    }

    #[test]
    fn singleton_key_returns_its_value() {
        let mut t = Tape::new();
        let q = t.constant(Tensor::from_rows(&[[5.0, -1.0], [0.3, 9.0]]).unwrap()).unwrap();
        let k = t.constant(Tensor::row_vector(vec![0.7, 0.2])).unwrap();
        let v = t.constant(Tensor::row_vector(vec![1.5, -2.5, 3.0])).unwrap();
        let o = attention(&mut t, q, k, v).unwrap();
        for r in 0..2 {
            assert_eq!(t.value(o).row(r), &[1.5, -2.5, 3.0]);
        }
    }

    #[test]
    fn aligned_key_dominates() {
        let mut t = Tape::new();
        let q = t.constant(Tensor::row_vector(vec![20.0, 0.0])).unwrap();
        let k = t.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]).unwrap()).unwrap();
        let v = t.constant(Tensor::from_rows(&[[1.0], [2.0], [3.0]]).unwrap()).unwrap();
        let o = attention(&mut t, q, k, v).unwrap();
        assert!((t.value(o).data()[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn single_identity_head_is_plain_attention() {
        let mut store = ParamStore::new();
        let id = |s: &mut ParamStore, n: &str| s.add(n, Tensor::identity(3));
        let a = Attention {
            wq: vec![id(&mut store, "q")],
            wk: vec![id(&mut store, "k")],
            wv: vec![id(&mut store, "v")],
            wm: id(&mut store, "m"),
            head_width: 3,
        };
        let x = Tensor::from_rows(&[[0.1, 0.4, -0.3], [1.0, -0.2, 0.5]]).unwrap();
        let mut t = Tape::new();
        let p = t.bind(&store).unwrap();
        let xv = t.constant(x).unwrap();
        let m = multi_head(&mut t, &p, &a, xv, xv, xv).unwrap();
        let plain = attention(&mut t, xv, xv, xv).unwrap();
        assert!(t.value(m).max_abs_diff(t.value(plain)) < 1e-15);
    }

    #[test]
    fn shapes_follow_the_configuration() {
        for heads in [1, 2, 3, 8] {
            let cfg = AleceConfig { heads, ..tiny() };
            let m = AleceModel::new(cfg, 1);
            let mut t = Tape::new();
            let p = t.bind(m.params()).unwrap();
            let x = t.constant(Tensor::filled(3, 4, 0.1)).unwrap();
            let z = m.encode(&mut t, &p, x).unwrap();
            assert_eq!(t.value(z).shape(), [3, 8]);
            let q = t.constant(Tensor::filled(5, 8, 0.5)).unwrap();
            let y = m.analyze(&mut t, &p, z, q).unwrap();
            assert_eq!(t.value(y).shape(), [5, 1]);
        }
    }

    #[test]
    fn inference_is_deterministic_and_clamped() {
        let m = AleceModel::new(tiny(), 3);
        let x = Tensor::filled(3, 4, 0.2);
        let q = Tensor::filled(2, 8, 0.3);
        let a = m.predict_log(&x, &q).unwrap();
        let b = m.predict_log(&x, &q).unwrap();
        assert_eq!(a, b);
        assert!(m.estimate(&x, &q).unwrap().iter().all(|c| *c >= 1.0));
        assert_eq!(log_to_card(0.0), 1.0);
        assert!((log_to_card(100f64.ln()) - 100.0).abs() < 1e-9);
        assert_eq!(log_to_card(-3.0), 1.0);
    }

    #[test]
    fn stacked_queries_match_one_at_a_time() {
        let m = AleceModel::new(tiny(), 5);
        let x = Tensor::from_rows(&[[0.1, 0.2, 0.3, 0.4], [0.0, 0.5, 0.1, 0.9], [0.2, 0.2, 0.7, 0.0]]).unwrap();
        let q = Tensor::from_rows(&[[0.0, 1.0, 0.0, 1.0, 0.2, 0.4, 0.0, 1.0], [1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.5, 0.6]]).unwrap();
        let both = m.predict_log(&x, &q).unwrap();
        for r in 0..2 {
            let one = m.predict_log(&x, &Tensor::row_vector(q.row(r).to_vec())).unwrap();
            assert!((one[0] - both[r]).abs() < 1e-12);
        }
    }

    #[test]
    fn mlp_input_is_flattened_states_plus_query() {
        let m = MlpModel::new(3, 4, 8, 0);
        assert_eq!(m.input_width(), 20);
        let out = m.predict_log(&Tensor::filled(3, 4, 0.1), &Tensor::filled(4, 8, 0.2)).unwrap();
        assert_eq!(out.len(), 4);
    }
}
