//! Evaluation of a model on task samples, with gate traces for analysis.

use serde::{Deserialize, Serialize};

use crate::analysis::{GateTrace, UsageReport};
use crate::error::{Error, Result};
use crate::model::{forward, GateForcing, ModelConfig, ModelParams};
use crate::scalar::Scalar;
use crate::tasks::TaskSample;

pub const EVAL_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub schema_version: u32,
    pub task: String,
    pub force_gates: GateForcing,
    pub samples: usize,
    /// Greedy next-token accuracy over scored positions.
    pub accuracy: f64,
    /// Fraction of samples with every scored position correct.
    pub sequence_accuracy: f64,
    /// Mean per-sample cross-entropy over scored positions (nats).
    pub loss: f64,
    pub usage: UsageReport,
}

fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    row[target] - lse
}

/// First index of the largest logit.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Forward every sample (with gates forced as requested) and score the
/// positions selected by each sample's loss mask.
pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    samples: &[TaskSample],
    task: &str,
    forcing: GateForcing,
) -> Result<(EvalMetrics, Vec<GateTrace>)> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation samples"));
    }
    let params = forcing.apply(params);
    let v = cfg.vocab_size;
    let (mut hits, mut scored, mut exact, mut loss) = (0usize, 0usize, 0usize, 0.0);
    let mut traces = Vec::with_capacity(samples.len());
    for (id, s) in samples.iter().enumerate() {
        s.validate(v)?;
        let (logits, gates) = forward(&params, cfg, &s.tokens)?;
        let logits = logits.to_f64_vec();
        let targets = s.targets();
        let positions: Vec<usize> = s.loss_positions().collect();
        if positions.is_empty() {
            return Err(Error::NoLossPositions);
        }
        let mut all = true;
        let mut nll = 0.0;
        for &i in &positions {
            let row = &logits[i * v..(i + 1) * v];
            let ok = argmax(row) == targets[i];
            hits += ok as usize;
            all &= ok;
            nll -= log_softmax_at(row, targets[i]);
        }
        scored += positions.len();
        exact += all as usize;
        loss += nll / positions.len() as f64;
        traces.push(
            GateTrace::from_layers(&gates, s.meta.task.name(), id as u64)?
                .with_tokens(s.tokens.clone(), s.loss_mask.clone()),
        );
    }
    let n = samples.len() as f64;
    Ok((
        EvalMetrics {
            schema_version: EVAL_SCHEMA_VERSION,
            task: task.to_string(),
            force_gates: forcing,
            samples: samples.len(),
            accuracy: hits as f64 / scored as f64,
            sequence_accuracy: exact as f64 / n,
            loss: loss / n,
            usage: UsageReport::from_traces(&traces)?,
        },
        traces,
    ))
}
