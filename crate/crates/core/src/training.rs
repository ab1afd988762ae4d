//! Joint training of model and routers: cross-entropy plus an L1 penalty on
//! router scores, optimized with AdamW.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionMode;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{forward_graph, ModelConfig, ModelParams, ParamKind};
use crate::scalar::Scalar;
use crate::tasks::TaskSample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the router-score penalty.
    pub lambda: f64,
    pub lr: f64,
    /// Multiplier on `lr` for router weights and biases.
    pub router_lr_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Leading steps trained as a plain full-attention model (no routing,
    /// no penalty); routed training starts from that base.
    pub pretrain_steps: usize,
    /// Train only the routers, keeping every other parameter fixed.
    pub freeze_base: bool,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 3e-4,
            lr: 3e-4,
            router_lr_scale: 1.0,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_ratio: 0.03,
            steps: 200,
            batch_size: 8,
            seed: 0,
            pretrain_steps: 0,
            freeze_base: false,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be a finite non-negative number");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.router_lr_scale >= 0.0) {
            return bad("lr must be positive and router_lr_scale non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps must be positive and weight_decay non-negative");
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must lie in [0, 1]");
        }
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be positive");
        }
        if self.pretrain_steps >= self.steps {
            return bad("pretrain_steps must be smaller than steps");
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lm_loss: f64,
    pub reg_loss: f64,
    pub total_loss: f64,
    /// Fraction of open gates over the batch.
    pub mu_f: f64,
    pub lr: f64,
}

pub const CSV_HEADER: &str = "step,lm_loss,reg_loss,total_loss,mu_f,lr";

impl StepRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.lm_loss, self.reg_loss, self.total_loss, self.mu_f, self.lr
        )
    }
}

pub fn write_csv<W: Write>(mut w: W, records: &[StepRecord]) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in records {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Mean router score over every layer, head and position.
pub fn reg_loss<T: Scalar>(g: &mut Graph<T>, scores: &[Var]) -> Result<Var> {
    g.mean_of(scores)
}

/// `lm + lambda * reg`.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, lm: Var, reg: Var, lambda: f64) -> Result<Var> {
    let r = g.scale(reg, T::from_f64_lossy(lambda))?;
    g.add(lm, r)
}

/// Learning rate at 1-based `step`: linear warmup over
/// `ceil(ratio * total)` steps, constant afterwards.
pub fn lr_at(step: usize, total: usize, base: f64, ratio: f64) -> f64 {
    // Guard against 0.03 * 1000 landing a hair above 30.
    let warm = (ratio * total as f64 - 1e-9).ceil().max(0.0) as usize;
    if warm == 0 || step >= warm {
        base
    } else {
        base * step as f64 / warm as f64
    }
}

/// Decoupled-weight-decay Adam. Moments are kept in f64 regardless of `T`.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update at 1-based step `t`. `lr[i]` and `decay[i]` apply to
    /// `params[i]`; parameters without a gradient are left alone.
    pub fn step<T: Scalar>(
        &mut self,
        params: &mut [&mut crate::Tensor<T>],
        grads: &[Option<Vec<f64>>],
        lr: &[f64],
        decay: &[bool],
        t: usize,
    ) -> Result<()> {
        if grads.len() != params.len() || lr.len() != params.len() || decay.len() != params.len() {
            return Err(Error::Invalid("optimizer inputs disagree in length".into()));
        }
        if t == 0 {
            return Err(Error::Invalid("optimizer steps are 1-based".into()));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            if g.len() != p.numel() {
                return Err(Error::Invalid(format!("gradient {i} has the wrong size")));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let wd = if decay[i] { self.weight_decay } else { 0.0 };
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let mut xv = x.as_f64();
                xv -= lr[i] * wd * xv;
                xv -= lr[i] * mhat / (vhat.sqrt() + self.eps);
                *x = T::from_f64_lossy(xv);
            }
        }
        Ok(())
    }
}

/// Scalars of one step's batch objective.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub lm_loss: f64,
    pub reg_loss: f64,
    pub total_loss: f64,
    pub mu_f: f64,
    /// Gradient per parameter in [`ModelParams::named`] order.
    pub grads: Vec<Option<Vec<f64>>>,
}

/// Forward and backward over a batch in one graph. The language-model loss
/// is the mean of per-sample cross-entropies. In [`AttentionMode::FullOnly`]
/// there are no router scores: the penalty is zero and every gate counts as open.
pub fn batch_loss<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    batch: &[TaskSample],
    lambda: f64,
    freeze_base: bool,
    mode: AttentionMode,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut g = Graph::new();
    let vars = params.register(&mut g, |k| !freeze_base || k.is_router());
    let mut ces = Vec::with_capacity(batch.len());
    let mut scores = Vec::new();
    let mut gates = Vec::new();
    for s in batch {
        s.validate(cfg.vocab_size)?;
        let fwd = forward_graph(&mut g, &vars, cfg, &s.tokens, mode)?;
        ces.push(g.cross_entropy(fwd.logits, &s.targets(), &s.loss_mask)?);
        scores.extend(fwd.scores);
        gates.extend(fwd.gates);
    }
    let lm = g.mean_of(&ces)?;
    let reg = if scores.is_empty() {
        g.constant(crate::Tensor::scalar(T::zero()))
    } else {
        reg_loss(&mut g, &scores)?
    };
    let total = total_loss(&mut g, lm, reg, lambda)?;
    g.backward(total)?;
    let (mut ones, mut entries) = (0usize, 0usize);
    for &gt in &gates {
        let d = g.value(gt).data();
        ones += d.iter().filter(|&&x| x > T::zero()).count();
        entries += d.len();
    }
    let grads = vars
        .ordered()
        .into_iter()
        .map(|v| g.grad(v).map(|t| t.to_f64_vec()))
        .collect();
    Ok(BatchLoss {
        lm_loss: g.value(lm).item().as_f64(),
        reg_loss: g.value(reg).item().as_f64(),
        total_loss: g.value(total).item().as_f64(),
        mu_f: if entries == 0 { 1.0 } else { ones as f64 / entries as f64 },
        grads,
    })
}

fn clip(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().flat_map(|g| g.iter_mut()).for_each(|x| *x *= s);
    }
    norm
}

/// Resumable training state: parameters, optimizer moments and the step
/// counter. Cloning a trainer forks a run; `model` and `config` may be
/// changed between calls to [`Trainer::run_until`] (e.g. after pretraining).
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub params: ModelParams<T>,
    pub model: ModelConfig,
    pub config: TrainConfig,
    opt: AdamW,
    step: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(params: ModelParams<T>, model: &ModelConfig, config: &TrainConfig) -> Result<Self> {
        model.validate()?;
        config.validate()?;
        Ok(Self {
            params,
            model: model.clone(),
            config: config.clone(),
            opt: AdamW::new(config.beta1, config.beta2, config.eps, config.weight_decay),
            step: 0,
        })
    }

    /// Steps completed so far.
    pub fn step(&self) -> usize {
        self.step
    }

    /// Train through step `last` (1-based, at most `config.steps`), drawing
    /// `batch_size` samples per step from `data`. `on_step` sees every
    /// record as it is produced; on divergence it also receives a final
    /// record whose losses are NaN, and training stops with
    /// [`Error::Diverged`].
    pub fn run_until(
        &mut self,
        last: usize,
        data: &mut dyn Iterator<Item = TaskSample>,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<Vec<StepRecord>> {
        let (cfg, tc) = (&self.model, &self.config);
        cfg.validate()?;
        tc.validate()?;
        if last > tc.steps {
            return Err(Error::Invalid(format!("step {last} is beyond the configured {} steps", tc.steps)));
        }
        let kinds: Vec<ParamKind> = self.params.named().iter().map(|(_, k, _)| *k).collect();
        let decay: Vec<bool> = kinds.iter().map(|k| k.decays()).collect();
        let mut records = Vec::with_capacity(last.saturating_sub(self.step));
        while self.step < last {
            let step = self.step + 1;
            let lr = lr_at(step, tc.steps, tc.lr, tc.warmup_ratio);
            let batch: Vec<TaskSample> = (&mut *data).take(tc.batch_size).collect();
            if batch.len() < tc.batch_size {
                return Err(Error::Empty("training data ran out"));
            }
            let diverged = |on_step: &mut dyn FnMut(&StepRecord)| {
                on_step(&StepRecord {
                    step,
                    lm_loss: f64::NAN,
                    reg_loss: f64::NAN,
                    total_loss: f64::NAN,
                    mu_f: f64::NAN,
                    lr,
                });
                Error::Diverged { step }
            };
            let mode = if step <= tc.pretrain_steps {
                AttentionMode::FullOnly
            } else {
                AttentionMode::Routed
            };
            let mut bl = match batch_loss(&self.params, cfg, &batch, tc.lambda, tc.freeze_base, mode) {
                Ok(bl) => bl,
                Err(Error::NonFinite { .. }) => return Err(diverged(&mut on_step)),
                Err(e) => return Err(e),
            };
            if !bl.total_loss.is_finite() || bl.grads.iter().flatten().flatten().any(|x| !x.is_finite()) {
                return Err(diverged(&mut on_step));
            }
            if let Some(c) = tc.grad_clip {
                clip(&mut bl.grads, c);
            }
            let lrs: Vec<f64> = kinds
                .iter()
                .map(|k| if k.is_router() { lr * tc.router_lr_scale } else { lr })
                .collect();
            self.opt.step(&mut self.params.tensors_mut(), &bl.grads, &lrs, &decay, step)?;
            if self.params.named().iter().any(|(_, _, t)| !t.is_finite()) {
                return Err(diverged(&mut on_step));
            }
            self.step = step;
            let rec = StepRecord {
                step,
                lm_loss: bl.lm_loss,
                reg_loss: bl.reg_loss,
                total_loss: bl.total_loss,
                mu_f: bl.mu_f,
                lr,
            };
            on_step(&rec);
            records.push(rec);
        }
        Ok(records)
    }
}

/// Run all `tc.steps` steps from fresh optimizer state.
pub fn train<T: Scalar>(
    params: ModelParams<T>,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    data: &mut dyn Iterator<Item = TaskSample>,
    on_step: impl FnMut(&StepRecord),
) -> Result<(ModelParams<T>, Vec<StepRecord>)> {
    let mut t = Trainer::new(params, cfg, tc)?;
    let records = t.run_until(tc.steps, data, on_step)?;
    Ok((t.params, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::tasks::{MixedStream, TaskKind, TaskMix};
    use crate::Tensor;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 64,
            model_dim: 16,
            num_layers: 1,
            num_heads: 2,
            mlp_ratio: 2,
            max_seq_len: 32,
            window: 4,
            threshold: 0.5,
            seed: 0,
        }
    }

    #[test]
    fn warmup_schedule() {
        assert_eq!(lr_at(15, 1000, 1.0, 0.03), 0.5);
        assert_eq!(lr_at(30, 1000, 1.0, 0.03), 1.0);
        assert_eq!(lr_at(500, 1000, 1.0, 0.03), 1.0);
        assert_eq!(lr_at(1, 10, 2.0, 0.0), 2.0);
    }

    #[test]
    fn first_adamw_step_closed_form() {
        let mut p = Tensor::<f64>::from_f64(&[1], &[0.0]).unwrap();
        let mut opt = AdamW::new(0.9, 0.95, 1e-8, 0.0);
        opt.step(&mut [&mut p], &[Some(vec![1.0])], &[0.1], &[true], 1).unwrap();
        assert!((p.data()[0] - (-0.1 / (1.0 + 1e-8))).abs() < 1e-15);

        // Decoupled decay shrinks the weight before the gradient step.
        let mut p = Tensor::<f64>::from_f64(&[1], &[2.0]).unwrap();
        let mut opt = AdamW::new(0.9, 0.95, 1e-8, 0.5);
        opt.step(&mut [&mut p], &[Some(vec![-3.0])], &[0.1], &[true], 1).unwrap();
        assert!((p.data()[0] - (2.0 * 0.95 + 0.1 * 3.0 / (3.0 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn total_is_lm_plus_scaled_reg() {
        let mut g = Graph::<f64>::new();
        let lm = g.constant(Tensor::scalar(2.0));
        let s = g.param(Tensor::from_f64(&[2, 2], &[0.2, 0.4, 0.6, 0.8]).unwrap());
        let reg = reg_loss(&mut g, &[s]).unwrap();
        let t = total_loss(&mut g, lm, reg, 0.1).unwrap();
        assert!((g.value(reg).item() - 0.5).abs() < 1e-15);
        assert!((g.value(t).item() - 2.05).abs() < 1e-15);
        g.backward(t).unwrap();
        assert!(g.grad(s).unwrap().data().iter().all(|&x| (x - 0.025).abs() < 1e-15));
    }

    #[test]
    fn records_are_consistent_and_deterministic() {
        let cfg = tiny();
        let tc = TrainConfig {
            steps: 4,
            batch_size: 2,
            lambda: 0.5,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let run = || {
            let p = init_params::<f64>(&cfg, 3).unwrap();
            let mut data = MixedStream::new(TaskMix::only(TaskKind::Counting, 16), 5).unwrap();
            train(p, &cfg, &tc, &mut data, |_| {}).unwrap()
        };
        let (pa, ra) = run();
        let (pb, rb) = run();
        assert_eq!(ra, rb);
        assert_eq!(pa, pb);
        for r in &ra {
            assert!((r.total_loss - (r.lm_loss + tc.lambda * r.reg_loss)).abs() < 1e-6);
            assert!((0.0..=1.0).contains(&r.mu_f));
        }
        let mut csv = Vec::new();
        write_csv(&mut csv, &ra).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn forked_run_matches_fresh_run() {
        let cfg = tiny();
        let tc = TrainConfig {
            steps: 6,
            pretrain_steps: 3,
            batch_size: 2,
            lambda: 0.2,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let stream = || MixedStream::new(TaskMix::only(TaskKind::Counting, 16), 5).unwrap();
        let p = init_params::<f64>(&cfg, 3).unwrap();
        let (fresh, fresh_recs) = train(p.clone(), &cfg, &tc, &mut stream(), |_| {}).unwrap();

        // Pretrain with a different lambda and window: neither is used before routing starts.
        let mut other = tc.clone();
        other.lambda = 0.0;
        let mut wide = cfg.clone();
        wide.window = 16;
        let mut data = stream();
        let mut t = Trainer::new(p, &wide, &other).unwrap();
        let mut recs = t.run_until(3, &mut data, |_| {}).unwrap();
        assert!(recs.iter().all(|r| r.mu_f == 1.0 && r.reg_loss == 0.0));
        let mut fork = t.clone();
        fork.config.lambda = 0.2;
        fork.model.window = cfg.window;
        recs.extend(fork.run_until(6, &mut data, |_| {}).unwrap());
        assert_eq!(fork.params, fresh);
        assert_eq!(recs, fresh_recs);
        assert!(t.run_until(7, &mut stream(), |_| {}).is_err());
    }

    #[test]
    fn frozen_base_only_moves_routers() {
        let cfg = tiny();
        let tc = TrainConfig {
            steps: 2,
            batch_size: 1,
            freeze_base: true,
            lambda: 1.0,
            lr: 1e-2,
            ..TrainConfig::default()
        };
        let p0 = init_params::<f64>(&cfg, 1).unwrap();
        let mut data = MixedStream::new(TaskMix::only(TaskKind::Counting, 16), 2).unwrap();
        let (p1, _) = train(p0.clone(), &cfg, &tc, &mut data, |_| {}).unwrap();
        for ((name, kind, a), (_, _, b)) in p0.named().iter().zip(p1.named()) {
            assert_eq!(kind.is_router(), *a != b, "{name}");
        }
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = tiny();
        let mut p = init_params::<f64>(&cfg, 1).unwrap();
        p.lm_head.data_mut()[0] = f64::NAN;
        let tc = TrainConfig {
            steps: 3,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let mut data = MixedStream::new(TaskMix::only(TaskKind::Counting, 16), 2).unwrap();
        let mut seen = Vec::new();
        let err = train(p, &cfg, &tc, &mut data, |r| seen.push(r.clone())).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 1 }));
        assert!(seen.last().unwrap().lm_loss.is_nan());
    }

    #[test]
    fn config_rejects_unknown_fields() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lambda": 0.1}"#).is_ok());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lamda": 0.1}"#).is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lambda": [0.1, 0.2]}"#).is_err());
    }
}
