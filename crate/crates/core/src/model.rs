//! Decoder-only language model built from routed attention blocks.
//!
//! Pre-norm residual stack: `x += Attn(norm(x)); x += MLP(norm(x))`, a final
//! RMS norm and an untied LM head. Absolute sinusoidal positions are added to
//! the token embeddings. The router reads the normalized block input.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{aha_block_graph, AhaBlockWeights, AhaConfig, AttentionMode, BlockVars, GateMatrix};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

/// Router bias magnitude used to force every gate open or shut.
pub const FORCED_ROUTER_BIAS: f64 = 1e4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub max_seq_len: usize,
    pub window: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            model_dim: 64,
            num_layers: 2,
            num_heads: 4,
            mlp_ratio: 4,
            max_seq_len: 256,
            window: 8,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn aha(&self) -> AhaConfig {
        AhaConfig {
            model_dim: self.model_dim,
            num_heads: self.num_heads,
            window: self.window,
            threshold: self.threshold,
        }
    }

    pub fn mlp_dim(&self) -> usize {
        self.mlp_ratio * self.model_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.aha().validate()?;
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("num_layers", self.num_layers),
            ("mlp_ratio", self.mlp_ratio),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (v, d, m, h) = (self.vocab_size, self.model_dim, self.num_heads, self.mlp_dim());
        let per_layer = 4 * d * d + d * m + m + 2 * d + 2 * d * h;
        v * d + self.num_layers * per_layer + d + d * v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub attn: AhaBlockWeights<T>,
    pub attn_norm: Tensor<T>,
    pub mlp_norm: Tensor<T>,
    pub mlp_in: Tensor<T>,
    pub mlp_out: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub embed: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Tensor<T>,
    pub lm_head: Tensor<T>,
}

/// How a parameter is treated by the optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    /// Norm gains: no weight decay.
    Gain,
    /// Router weight matrix.
    Router,
    /// Router bias: no weight decay.
    RouterBias,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Router)
    }

    pub fn is_router(self) -> bool {
        matches!(self, ParamKind::Router | ParamKind::RouterBias)
    }
}

/// Deterministic parameter initialization from `seed`.
///
/// Weights ~ N(0, 0.02²); output projections (`w_o`, `mlp_out`) are scaled by
/// `1/√(2L)`; norm gains are 1; router weights start at 0 and router biases
/// at +1 so every gate starts open.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (v, d, h) = (cfg.vocab_size, cfg.model_dim, cfg.mlp_dim());
    let out_std = INIT_STD / (2.0 * cfg.num_layers as f64).sqrt();
    let aha = cfg.aha();
    let embed = Tensor::randn(&[v, d], INIT_STD, &mut rng);
    let layers = (0..cfg.num_layers)
        .map(|_| LayerParams {
            attn: AhaBlockWeights::init(&aha, INIT_STD, out_std, &mut rng),
            attn_norm: Tensor::full(&[d], T::one()),
            mlp_norm: Tensor::full(&[d], T::one()),
            mlp_in: Tensor::randn(&[d, h], INIT_STD, &mut rng),
            mlp_out: Tensor::randn(&[h, d], out_std, &mut rng),
        })
        .collect();
    Ok(ModelParams {
        embed,
        layers,
        final_norm: Tensor::full(&[d], T::one()),
        lm_head: Tensor::randn(&[d, v], INIT_STD, &mut rng),
    })
}

impl<T: Scalar> ModelParams<T> {
    /// Every parameter tensor with a stable name, in a fixed order.
    pub fn named(&self) -> Vec<(String, ParamKind, &Tensor<T>)> {
        let mut out = vec![("embed".to_string(), ParamKind::Weight, &self.embed)];
        for (k, l) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layers.{k}.{s}");
            out.extend([
                (p("attn.w_q"), ParamKind::Weight, &l.attn.w_q),
                (p("attn.w_k"), ParamKind::Weight, &l.attn.w_k),
                (p("attn.w_v"), ParamKind::Weight, &l.attn.w_v),
                (p("attn.w_o"), ParamKind::Weight, &l.attn.w_o),
                (p("attn.w_router"), ParamKind::Router, &l.attn.w_router),
                (p("attn.router_bias"), ParamKind::RouterBias, &l.attn.router_bias),
                (p("attn_norm"), ParamKind::Gain, &l.attn_norm),
                (p("mlp_norm"), ParamKind::Gain, &l.mlp_norm),
                (p("mlp_in"), ParamKind::Weight, &l.mlp_in),
                (p("mlp_out"), ParamKind::Weight, &l.mlp_out),
            ]);
        }
        out.push(("final_norm".into(), ParamKind::Gain, &self.final_norm));
        out.push(("lm_head".into(), ParamKind::Weight, &self.lm_head));
        out
    }

    /// Mutable views in the same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.embed];
        for l in &mut self.layers {
            out.extend([
                &mut l.attn.w_q,
                &mut l.attn.w_k,
                &mut l.attn.w_v,
                &mut l.attn.w_o,
                &mut l.attn.w_router,
                &mut l.attn.router_bias,
                &mut l.attn_norm,
                &mut l.mlp_norm,
                &mut l.mlp_in,
                &mut l.mlp_out,
            ]);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, _, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut out = ModelParams {
            embed: self.embed.cast(),
            layers: Vec::new(),
            final_norm: self.final_norm.cast(),
            lm_head: self.lm_head.cast(),
        };
        for l in &self.layers {
            out.layers.push(LayerParams {
                attn: AhaBlockWeights {
                    w_q: l.attn.w_q.cast(),
                    w_k: l.attn.w_k.cast(),
                    w_v: l.attn.w_v.cast(),
                    w_o: l.attn.w_o.cast(),
                    w_router: l.attn.w_router.cast(),
                    router_bias: l.attn.router_bias.cast(),
                },
                attn_norm: l.attn_norm.cast(),
                mlp_norm: l.mlp_norm.cast(),
                mlp_in: l.mlp_in.cast(),
                mlp_out: l.mlp_out.cast(),
            });
        }
        out
    }

    pub fn set_router_bias(&mut self, value: f64) {
        for l in &mut self.layers {
            l.attn.router_bias.data_mut().fill(T::from_f64_lossy(value));
        }
    }

    /// Leaves on `g` for every parameter; `trainable(kind)` decides which
    /// receive gradients.
    pub fn register(&self, g: &mut Graph<T>, trainable: impl Fn(ParamKind) -> bool) -> ParamVars {
        let w = trainable(ParamKind::Weight);
        let gain = trainable(ParamKind::Gain);
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let mut attn = l.attn.register(g, w);
                attn.w_router = g.leaf(l.attn.w_router.clone(), trainable(ParamKind::Router));
                attn.router_bias = g.leaf(l.attn.router_bias.clone(), trainable(ParamKind::RouterBias));
                LayerVars {
                    attn,
                    attn_norm: g.leaf(l.attn_norm.clone(), gain),
                    mlp_norm: g.leaf(l.mlp_norm.clone(), gain),
                    mlp_in: g.leaf(l.mlp_in.clone(), w),
                    mlp_out: g.leaf(l.mlp_out.clone(), w),
                }
            })
            .collect();
        ParamVars {
            embed: g.leaf(self.embed.clone(), w),
            layers,
            final_norm: g.leaf(self.final_norm.clone(), gain),
            lm_head: g.leaf(self.lm_head.clone(), w),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub attn: BlockVars,
    pub attn_norm: Var,
    pub mlp_norm: Var,
    pub mlp_in: Var,
    pub mlp_out: Var,
}

#[derive(Clone, Debug)]
pub struct ParamVars {
    pub embed: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm: Var,
    pub lm_head: Var,
}

impl ParamVars {
    /// Handles in the same order as [`ModelParams::named`].
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = vec![self.embed];
        for l in &self.layers {
            let a = &l.attn;
            out.extend([
                a.w_q,
                a.w_k,
                a.w_v,
                a.w_o,
                a.w_router,
                a.router_bias,
                l.attn_norm,
                l.mlp_norm,
                l.mlp_in,
                l.mlp_out,
            ]);
        }
        out.push(self.final_norm);
        out.push(self.lm_head);
        out
    }
}

/// Sinusoidal absolute position table `[n × d]`.
pub fn sinusoidal_positions<T: Scalar>(n: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(n * d);
    for pos in 0..n {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            data.push(T::from_f64_lossy(v));
        }
    }
    Tensor::new(vec![n, d], data).expect("position table shape")
}

/// Graph nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardGraph {
    pub logits: Var,
    /// Per layer router scores `[n × m]` (empty for non-routed modes).
    pub scores: Vec<Var>,
    pub gates: Vec<Var>,
}

pub fn forward_graph<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ParamVars,
    cfg: &ModelConfig,
    tokens: &[usize],
    mode: AttentionMode,
) -> Result<ForwardGraph> {
    let n = tokens.len();
    if n == 0 {
        return Err(Error::Empty("token sequence"));
    }
    if n > cfg.max_seq_len {
        return Err(Error::Invalid(format!(
            "sequence of {n} tokens exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    let aha = cfg.aha();
    let emb = g.embedding(vars.embed, tokens)?;
    let pos = g.constant(sinusoidal_positions(n, cfg.model_dim));
    let mut x = g.add(emb, pos)?;
    let mut scores = Vec::new();
    let mut gates = Vec::new();
    for l in &vars.layers {
        let h = g.rmsnorm(x, l.attn_norm)?;
        let block = aha_block_graph(g, h, &l.attn, &aha, mode)?;
        if let (Some(s), Some(gt)) = (block.scores, block.gates) {
            scores.push(s);
            gates.push(gt);
        }
        x = g.add(x, block.out)?;
        let h = g.rmsnorm(x, l.mlp_norm)?;
        let h = g.matmul(h, l.mlp_in)?;
        let h = g.gelu(h)?;
        let h = g.matmul(h, l.mlp_out)?;
        x = g.add(x, h)?;
    }
    let h = g.rmsnorm(x, vars.final_norm)?;
    let logits = g.matmul(h, vars.lm_head)?;
    Ok(ForwardGraph { logits, scores, gates })
}

/// Inference forward pass: logits `[n × V]` and one gate matrix per layer.
pub fn forward<T: Scalar>(params: &ModelParams<T>, cfg: &ModelConfig, tokens: &[usize]) -> Result<(Tensor<T>, Vec<GateMatrix>)> {
    forward_with_mode(params, cfg, tokens, AttentionMode::Routed)
}

pub fn forward_with_mode<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    tokens: &[usize],
    mode: AttentionMode,
) -> Result<(Tensor<T>, Vec<GateMatrix>)> {
    let mut g = Graph::new();
    let vars = params.register(&mut g, |_| false);
    let fwd = forward_graph(&mut g, &vars, cfg, tokens, mode)?;
    let traces = fwd
        .scores
        .iter()
        .zip(&fwd.gates)
        .map(|(&s, &gt)| GateMatrix::from_scores(g.value(s), g.value(gt), cfg.threshold))
        .collect::<Result<Vec<_>>>()?;
    Ok((g.value(fwd.logits).clone(), traces))
}

/// Gate override used at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateForcing {
    Auto,
    AllFull,
    AllLocal,
}

impl GateForcing {
    /// Copy of `params` with router biases overridden to force the gates.
    pub fn apply<T: Scalar>(self, params: &ModelParams<T>) -> ModelParams<T> {
        let mut p = params.clone();
        match self {
            GateForcing::Auto => {}
            GateForcing::AllFull => p.set_router_bias(FORCED_ROUTER_BIAS),
            GateForcing::AllLocal => p.set_router_bias(-FORCED_ROUTER_BIAS),
        }
        p
    }
}

impl std::str::FromStr for GateForcing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Self::Auto),
            "all-full" => Ok(Self::AllFull),
            "all-local" => Ok(Self::AllLocal),
            other => Err(Error::Invalid(format!(
                "unknown gate forcing {other:?} (expected auto, all-full or all-local)"
            ))),
        }
    }
}
