//! Routed attention block.
//!
//! A per-layer router maps each token's (normalized) hidden state to one
//! score per head, `S = σ(X·W_router + b)`. A hard threshold turns scores into
//! gates; gate 1 sends that token-head pair through full causal attention,
//! gate 0 through sliding-window attention over the last `w` positions
//! (current token included). Head outputs are concatenated and projected by
//! `W_O`.
//!
//! Training computes both attention paths densely and selects per token-head,
//! so the forward value equals exactly one path. The threshold passes its
//! gradient straight through to the score.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Router bias used at initialization; `σ(1) ≈ 0.731` opens every gate at τ = 0.5.
pub const ROUTER_BIAS_INIT: f64 = 1.0;

/// First key query `i` may attend to: 0 for full attention, `i + 1 - w` (floored at 0) for a window of `w`.
pub fn first_visible_key(i: usize, window: Option<usize>) -> usize {
    window.map_or(0, |w| (i + 1).saturating_sub(w))
}

/// Keys visible to each query `[n × n]` (row-major, query-major) for one head
/// whose per-token gates are `gates` (true = full attention).
pub fn visibility_mask(gates: &[bool], window: usize) -> Vec<bool> {
    let n = gates.len();
    let mut mask = vec![false; n * n];
    for (i, &open) in gates.iter().enumerate() {
        let lo = first_visible_key(i, if open { None } else { Some(window) });
        mask[i * n + lo..=i * n + i].fill(true);
    }
    mask
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AhaConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub window: usize,
    pub threshold: f64,
}

impl AhaConfig {
    pub fn new(model_dim: usize, num_heads: usize, window: usize, threshold: f64) -> Result<Self> {
        let cfg = Self {
            model_dim,
            num_heads,
            window,
            threshold,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.window == 0 {
            return Err(Error::Config("window must be at least 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// Which attention path(s) a block runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    /// Router decides per token-head.
    Routed,
    /// Plain causal attention, router unused.
    FullOnly,
    /// Plain sliding-window attention, router unused.
    LocalOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AhaBlockWeights<T> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub w_router: Tensor<T>,
    pub router_bias: Tensor<T>,
}

impl<T: Scalar> AhaBlockWeights<T> {
    /// Projections ~ N(0, std²), output projection ~ N(0, out_std²), router
    /// weights zero and router bias [`ROUTER_BIAS_INIT`].
    pub fn init<R: Rng + ?Sized>(cfg: &AhaConfig, std: f64, out_std: f64, rng: &mut R) -> Self {
        let d = cfg.model_dim;
        Self {
            w_q: Tensor::randn(&[d, d], std, rng),
            w_k: Tensor::randn(&[d, d], std, rng),
            w_v: Tensor::randn(&[d, d], std, rng),
            w_o: Tensor::randn(&[d, d], out_std, rng),
            w_router: Tensor::zeros(&[d, cfg.num_heads]),
            router_bias: Tensor::full(&[cfg.num_heads], T::from_f64_lossy(ROUTER_BIAS_INIT)),
        }
    }

    pub fn check_shapes(&self, cfg: &AhaConfig) -> Result<()> {
        let (d, m) = (cfg.model_dim, cfg.num_heads);
        let expect: [(&str, &Tensor<T>, &[usize]); 6] = [
            ("w_q", &self.w_q, &[d, d]),
            ("w_k", &self.w_k, &[d, d]),
            ("w_v", &self.w_v, &[d, d]),
            ("w_o", &self.w_o, &[d, d]),
            ("w_router", &self.w_router, &[d, m]),
            ("router_bias", &self.router_bias, &[m]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape {
                return Err(shape_err(
                    "aha_block",
                    format!("{name} has shape {:?}, expected {shape:?}", t.shape()),
                ));
            }
        }
        Ok(())
    }

    pub fn register(&self, g: &mut Graph<T>, trainable: bool) -> BlockVars {
        BlockVars {
            w_q: g.leaf(self.w_q.clone(), trainable),
            w_k: g.leaf(self.w_k.clone(), trainable),
            w_v: g.leaf(self.w_v.clone(), trainable),
            w_o: g.leaf(self.w_o.clone(), trainable),
            w_router: g.leaf(self.w_router.clone(), trainable),
            router_bias: g.leaf(self.router_bias.clone(), trainable),
        }
    }
}

/// Graph handles for one block's weights.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub w_router: Var,
    pub router_bias: Var,
}

/// Router scores and the binary gates derived from them for one layer.
///
/// Both are `n × m`, row-major by token.
#[derive(Clone, Debug, PartialEq)]
pub struct GateMatrix {
    pub n: usize,
    pub m: usize,
    pub threshold: f64,
    pub scores: Vec<f64>,
    pub gates: Vec<bool>,
}

impl GateMatrix {
    pub fn from_scores(scores: &Tensor<impl Scalar>, gates: &Tensor<impl Scalar>, threshold: f64) -> Result<Self> {
        let (n, m) = scores.dims2("gate_matrix")?;
        if gates.shape() != scores.shape() {
            return Err(shape_err("gate_matrix", "scores and gates differ in shape"));
        }
        Ok(Self {
            n,
            m,
            threshold,
            scores: scores.to_f64_vec(),
            gates: gates.data().iter().map(|v| v.as_f64() == 1.0).collect(),
        })
    }

    pub fn gate(&self, token: usize, head: usize) -> bool {
        self.gates[token * self.m + head]
    }

    pub fn score(&self, token: usize, head: usize) -> f64 {
        self.scores[token * self.m + head]
    }

    pub fn ones(&self) -> usize {
        self.gates.iter().filter(|&&g| g).count()
    }
}

/// Graph nodes produced by one routed attention sublayer.
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub out: Var,
    /// Router scores `[n × m]`; `None` unless the block is routed.
    pub scores: Option<Var>,
    pub gates: Option<Var>,
}

/// `σ(X·W_router + b)` on the graph.
pub fn router_scores_graph<T: Scalar>(g: &mut Graph<T>, x: Var, w_router: Var, bias: Var) -> Result<Var> {
    let z = g.matmul(x, w_router)?;
    let z = g.add_row_bias(z, bias)?;
    g.sigmoid(z)
}

/// Attention sublayer on the graph: router, both paths, per token-head
/// selection, output projection.
pub fn aha_block_graph<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    w: &BlockVars,
    cfg: &AhaConfig,
    mode: AttentionMode,
) -> Result<BlockOutput> {
    let m = cfg.num_heads;
    let q = g.matmul(x, w.w_q)?;
    let k = g.matmul(x, w.w_k)?;
    let v = g.matmul(x, w.w_v)?;
    let (heads_out, scores, gates) = match mode {
        AttentionMode::FullOnly => (g.attention(q, k, v, m, None)?, None, None),
        AttentionMode::LocalOnly => (g.attention(q, k, v, m, Some(cfg.window))?, None, None),
        AttentionMode::Routed => {
            let s = router_scores_graph(g, x, w.w_router, w.router_bias)?;
            let gate = g.ste_threshold(s, T::from_f64_lossy(cfg.threshold))?;
            let full = g.attention(q, k, v, m, None)?;
            let local = g.attention(q, k, v, m, Some(cfg.window))?;
            (g.gate_select(gate, full, local, m)?, Some(s), Some(gate))
        }
    };
    let out = g.matmul(heads_out, w.w_o)?;
    Ok(BlockOutput { out, scores, gates })
}

/// Router scores `[n × m]` for hidden states `x[n × d]`.
pub fn router_scores<T: Scalar>(x: &Tensor<T>, w_router: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (x, w, b) = (g.constant(x.clone()), g.constant(w_router.clone()), g.constant(bias.clone()));
    let s = router_scores_graph(&mut g, x, w, b)?;
    Ok(g.value(s).clone())
}

fn split_heads<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [n, m, hd] => Ok((*n, *m, *hd)),
        s => Err(shape_err("attention", format!("expected [n, heads, head_dim], got {s:?}"))),
    }
}

fn attention_3d<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, window: Option<usize>) -> Result<Tensor<T>> {
    let (n, m, hd) = split_heads(q)?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(shape_err("attention", "q, k, v must share a shape"));
    }
    let mut g = Graph::new();
    let flat = |t: &Tensor<T>| t.clone().reshape(&[n, m * hd]);
    let (qv, kv, vv) = (g.constant(flat(q)?), g.constant(flat(k)?), g.constant(flat(v)?));
    let o = g.attention(qv, kv, vv, m, window)?;
    g.value(o).clone().reshape(&[n, m, hd])
}

/// Causal multi-head attention; `q`, `k`, `v` are `[n × heads × head_dim]`.
pub fn full_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    attention_3d(q, k, v, None)
}

/// Causal attention restricted to positions `max(0, i+1-w) ..= i`.
pub fn sliding_window_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    if window == 0 {
        return Err(Error::Invalid("window must be at least 1".into()));
    }
    attention_3d(q, k, v, Some(window))
}

/// Runs one routed attention sublayer on `x[n × d]`.
pub fn aha_block<T: Scalar>(x: &Tensor<T>, weights: &AhaBlockWeights<T>, cfg: &AhaConfig) -> Result<(Tensor<T>, GateMatrix)> {
    let (out, gates) = attention_block(x, weights, cfg, AttentionMode::Routed)?;
    Ok((out, gates.expect("routed block yields gates")))
}

/// Like [`aha_block`] but with an explicit path choice; non-routed modes return no gates.
pub fn attention_block<T: Scalar>(
    x: &Tensor<T>,
    weights: &AhaBlockWeights<T>,
    cfg: &AhaConfig,
    mode: AttentionMode,
) -> Result<(Tensor<T>, Option<GateMatrix>)> {
    cfg.validate()?;
    weights.check_shapes(cfg)?;
    let (n, d) = x.dims2("aha_block")?;
    if n == 0 || d != cfg.model_dim {
        return Err(shape_err("aha_block", format!("input [{n}x{d}] for model_dim {}", cfg.model_dim)));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let vars = weights.register(&mut g, false);
    let out = aha_block_graph(&mut g, xv, &vars, cfg, mode)?;
    let gates = match (out.scores, out.gates) {
        (Some(s), Some(gt)) => Some(GateMatrix::from_scores(g.value(s), g.value(gt), cfg.threshold)?),
        _ => None,
    };
    Ok((g.value(out.out).clone(), gates))
}

/// True when perturbing every token after position `i` (0-based) leaves the
/// block outputs at positions `0..=i` unchanged within 1e-6.
pub fn causal_independence_check<T: Scalar, R: Rng + ?Sized>(
    weights: &AhaBlockWeights<T>,
    cfg: &AhaConfig,
    x: &Tensor<T>,
    i: usize,
    rng: &mut R,
) -> Result<bool> {
    let (n, d) = x.dims2("causal_independence_check")?;
    if i >= n {
        return Err(Error::Invalid(format!("position {i} outside sequence of {n}")));
    }
    let (base, _) = aha_block(x, weights, cfg)?;
    let mut perturbed = x.clone();
    let noise: Tensor<T> = Tensor::randn(&[n, d], 1.0, rng);
    for (p, z) in perturbed.data_mut()[(i + 1) * d..]
        .iter_mut()
        .zip(&noise.data()[(i + 1) * d..])
    {
        *p += *z;
    }
    let (after, _) = aha_block(&perturbed, weights, cfg)?;
    let prefix = (i + 1) * d;
    Ok(base.data()[..prefix]
        .iter()
        .zip(&after.data()[..prefix])
        .all(|(a, b)| (a.as_f64() - b.as_f64()).abs() < 1e-6))
}
