//! Synthetic tasks with controlled dependency range.
//!
//! * counting: `1,2,3,...` continuation, solvable from the last few tokens.
//! * needle: a `# key value` pair planted early, recalled by `? key` at the
//!   end. Only the answer position carries loss, and the key distance sets
//!   how far back the model has to look.
//! * local_lm: a fixed random order-k Markov chain over a letter alphabet;
//!   the optimal predictor needs only the last k tokens.
//!
//! Every sequence starts with [`vocab::BOS`]. `loss_mask[i]` marks that the
//! model's prediction at position `i` (of token `i + 1`) is scored.

use std::io::{BufRead, Write};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Dirichlet;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod vocab {
    pub const SIZE: usize = 64;
    pub const DIGIT0: usize = 0;
    pub const SEP: usize = 10;
    pub const BOS: usize = 11;
    pub const QUERY: usize = 12;
    pub const PAIR: usize = 13;
    pub const FILLER0: usize = 16;
    pub const NUM_FILLER: usize = 16;
    pub const KEY0: usize = 32;
    pub const NUM_KEYS: usize = 16;
    pub const VALUE0: usize = 48;
    pub const NUM_VALUES: usize = 16;

    /// Printable form of a token id.
    pub fn symbol(id: usize) -> String {
        match id {
            0..=9 => id.to_string(),
            SEP => ",".into(),
            BOS => "<bos>".into(),
            QUERY => "?".into(),
            PAIR => "#".into(),
            FILLER0..=31 => ((b'a' + (id - FILLER0) as u8) as char).to_string(),
            KEY0..=47 => format!("K{}", id - KEY0),
            VALUE0..=63 => format!("V{}", id - VALUE0),
            _ => format!("<{id}>"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Counting,
    Needle,
    LocalLm,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Counting, TaskKind::Needle, TaskKind::LocalLm];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Counting => "counting",
            TaskKind::Needle => "needle",
            TaskKind::LocalLm => "local_lm",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown task {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub task: TaskKind,
    pub seed: u64,
    /// Token index range `[start, end)` holding the answer / continuation.
    pub answer_span: (usize, usize),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_distance: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSample {
    pub tokens: Vec<usize>,
    pub loss_mask: Vec<bool>,
    pub meta: SampleMeta,
}

impl TaskSample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Next-token targets aligned with positions; the last position has none
    /// and is reported as 0 (it is never in the loss mask).
    pub fn targets(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.tokens[1..].to_vec();
        t.push(0);
        t
    }

    pub fn loss_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.loss_mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i)
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.tokens.len() != self.loss_mask.len() {
            return Err(Error::Invalid("tokens and loss_mask differ in length".into()));
        }
        if !self.loss_mask.iter().any(|&m| m) || self.loss_mask.last() == Some(&true) {
            return Err(Error::Invalid("loss mask must select a position with a successor".into()));
        }
        if let Some(&id) = self.tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::TokenOutOfRange { id, vocab: vocab_size });
        }
        Ok(())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn push_number(out: &mut Vec<usize>, n: u64) {
    out.extend(n.to_string().bytes().map(|b| vocab::DIGIT0 + (b - b'0') as usize));
}

/// Comma-separated ascending integers from `start`, cut to `length` tokens.
/// Loss covers the second half of the sequence.
pub fn gen_counting_from(start: u64, length: usize, seed: u64) -> Result<TaskSample> {
    if length < 8 {
        return Err(Error::Invalid(format!("counting needs length >= 8, got {length}")));
    }
    let mut tokens = vec![vocab::BOS];
    let mut n = start;
    while tokens.len() < length {
        push_number(&mut tokens, n);
        tokens.push(vocab::SEP);
        n += 1;
    }
    tokens.truncate(length);
    let from = length / 2;
    let loss_mask = (0..length).map(|i| i >= from && i + 1 < length).collect();
    Ok(TaskSample {
        tokens,
        loss_mask,
        meta: SampleMeta {
            task: TaskKind::Counting,
            seed,
            answer_span: (from + 1, length),
            key_distance: None,
        },
    })
}

pub fn gen_counting(seed: u64, length: usize) -> Result<TaskSample> {
    let start = rng(seed).gen_range(0..200);
    gen_counting_from(start, length, seed)
}

/// Key-value recall. `key_distance` is the number of positions between the
/// planted value token and the position that must predict it.
pub fn gen_needle(seed: u64, length: usize, key_distance: usize) -> Result<TaskSample> {
    if length < 8 {
        return Err(Error::Invalid(format!("needle needs length >= 8, got {length}")));
    }
    if key_distance < 2 || key_distance + 5 > length {
        return Err(Error::Invalid(format!(
            "key_distance {key_distance} must lie in 2..={} for length {length}",
            length - 5
        )));
    }
    let mut r = rng(seed);
    let key = vocab::KEY0 + r.gen_range(0..vocab::NUM_KEYS);
    let value = vocab::VALUE0 + r.gen_range(0..vocab::NUM_VALUES);
    let mut tokens: Vec<usize> = (0..length)
        .map(|_| vocab::FILLER0 + r.gen_range(0..vocab::NUM_FILLER))
        .collect();
    tokens[0] = vocab::BOS;
    let answer_pos = length - 2;
    let value_pos = answer_pos - key_distance;
    tokens[value_pos - 2] = vocab::PAIR;
    tokens[value_pos - 1] = key;
    tokens[value_pos] = value;
    tokens[length - 3] = vocab::QUERY;
    tokens[length - 2] = key;
    tokens[length - 1] = value;
    let mut loss_mask = vec![false; length];
    loss_mask[answer_pos] = true;
    Ok(TaskSample {
        tokens,
        loss_mask,
        meta: SampleMeta {
            task: TaskKind::Needle,
            seed,
            answer_span: (length - 1, length),
            key_distance: Some(key_distance),
        },
    })
}

/// Seed of the transition table shared by every `local_lm` sample.
pub const LOCAL_LM_TABLE_SEED: u64 = 0x5eed_7ab1e;

/// Order-k Markov chain over the filler alphabet.
#[derive(Clone, Debug)]
pub struct LocalLmProcess {
    pub order: usize,
    /// Row per context (base-16 encoding of the last `order` symbols).
    pub table: Vec<Vec<f64>>,
}

impl LocalLmProcess {
    /// Transition rows drawn from a sparse Dirichlet(0.3) so each context has a
    /// few likely successors.
    pub fn new(order: usize, table_seed: u64) -> Result<Self> {
        if order == 0 || order > 3 {
            return Err(Error::Invalid(format!("local_lm order must be 1..=3, got {order}")));
        }
        let k = vocab::NUM_FILLER;
        let dir = Dirichlet::new(&[0.3; vocab::NUM_FILLER]).expect("dirichlet params");
        let mut r = rng(table_seed ^ order as u64);
        let table = (0..k.pow(order as u32)).map(|_| dir.sample(&mut r)).collect();
        Ok(Self { order, table })
    }

    fn context_index(&self, recent: &[usize]) -> usize {
        recent.iter().fold(0, |acc, &s| acc * vocab::NUM_FILLER + s)
    }

    /// Conditional distribution of the next symbol given the last `order` symbols.
    pub fn next_probs(&self, recent: &[usize]) -> &[f64] {
        &self.table[self.context_index(&recent[recent.len() - self.order..])]
    }

    /// Symbols in `0..16` (not token ids).
    pub fn sample_symbols(&self, seed: u64, count: usize) -> Vec<usize> {
        let mut r = rng(seed);
        let mut out: Vec<usize> = (0..self.order.min(count))
            .map(|_| r.gen_range(0..vocab::NUM_FILLER))
            .collect();
        while out.len() < count {
            let p = self.next_probs(&out);
            let idx = WeightedIndex::new(p).expect("valid row");
            out.push(idx.sample(&mut r));
        }
        out
    }

    /// Stationary distribution over contexts, by power iteration.
    pub fn stationary(&self) -> Vec<f64> {
        let k = vocab::NUM_FILLER;
        let states = self.table.len();
        let mut pi = vec![1.0 / states as f64; states];
        for _ in 0..10_000 {
            let mut next = vec![0.0; states];
            for (ctx, row) in self.table.iter().enumerate() {
                let shifted = (ctx * k) % states;
                for (s, &p) in row.iter().enumerate() {
                    next[shifted + s] += pi[ctx] * p;
                }
            }
            let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            pi = next;
            if delta < 1e-15 {
                break;
            }
        }
        pi
    }

    /// Entropy rate in nats per symbol: `Σ_ctx π(ctx) H(next | ctx)`.
    pub fn entropy_rate(&self) -> f64 {
        self.stationary()
            .iter()
            .zip(&self.table)
            .map(|(&p, row)| p * row.iter().filter(|&&q| q > 0.0).map(|&q| -q * q.ln()).sum::<f64>())
            .sum()
    }
}

/// Sample from the shared order-`order` chain.
pub fn gen_local_lm(seed: u64, length: usize, order: usize) -> Result<TaskSample> {
    gen_local_lm_with(&LocalLmProcess::new(order, LOCAL_LM_TABLE_SEED)?, seed, length)
}

pub fn gen_local_lm_with(process: &LocalLmProcess, seed: u64, length: usize) -> Result<TaskSample> {
    let order = process.order;
    if length < order + 3 {
        return Err(Error::Invalid(format!("local_lm length {length} too short for order {order}")));
    }
    let mut tokens = vec![vocab::BOS];
    tokens.extend(
        process
            .sample_symbols(seed, length - 1)
            .into_iter()
            .map(|s| vocab::FILLER0 + s),
    );
    let loss_mask = (0..length).map(|i| i >= order && i + 1 < length).collect();
    Ok(TaskSample {
        tokens,
        loss_mask,
        meta: SampleMeta {
            task: TaskKind::LocalLm,
            seed,
            answer_span: (order + 1, length),
            key_distance: None,
        },
    })
}

/// Parameters of a heterogeneous task stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskMix {
    /// Mixture weights for counting, needle, local_lm; must sum to 1.
    pub weights: [f64; 3],
    pub length: usize,
    pub needle_min_distance: usize,
    pub needle_max_distance: usize,
    pub local_order: usize,
}

impl Default for TaskMix {
    fn default() -> Self {
        Self {
            weights: [0.25, 0.5, 0.25],
            length: 48,
            needle_min_distance: 2,
            needle_max_distance: 43,
            local_order: 2,
        }
    }
}

impl TaskMix {
    pub fn only(task: TaskKind, length: usize) -> Self {
        let mut weights = [0.0; 3];
        weights[TaskKind::ALL.iter().position(|&t| t == task).unwrap()] = 1.0;
        Self {
            weights,
            length,
            needle_max_distance: length - 5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::Config("task weights must be non-negative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("task weights must sum to 1, got {total}")));
        }
        if self.length < 8 {
            return Err(Error::Config("task length must be at least 8".into()));
        }
        if self.weights[1] > 0.0
            && (self.needle_min_distance < 2
                || self.needle_min_distance > self.needle_max_distance
                || self.needle_max_distance + 5 > self.length)
        {
            return Err(Error::Config(format!(
                "needle distances {}..={} invalid for length {}",
                self.needle_min_distance, self.needle_max_distance, self.length
            )));
        }
        if self.weights[2] > 0.0 && !(1..=3).contains(&self.local_order) {
            return Err(Error::Config("local_order must be 1..=3".into()));
        }
        Ok(())
    }

    /// One sample of `task` from `seed` under this mix's parameters.
    pub fn sample(&self, task: TaskKind, seed: u64, process: Option<&LocalLmProcess>) -> Result<TaskSample> {
        match task {
            TaskKind::Counting => gen_counting(seed, self.length),
            TaskKind::Needle => {
                let d = rng(seed ^ 0xd157).gen_range(self.needle_min_distance..=self.needle_max_distance);
                gen_needle(seed, self.length, d)
            }
            TaskKind::LocalLm => match process {
                Some(p) => gen_local_lm_with(p, seed, self.length),
                None => gen_local_lm(seed, self.length, self.local_order),
            },
        }
    }
}

/// Reproducible interleaving of tasks: a seeded choice picks the task, a
/// second seeded stream supplies per-sample seeds.
#[derive(Clone, Debug)]
pub struct MixedStream {
    mix: TaskMix,
    choose: WeightedIndex<f64>,
    order_rng: ChaCha8Rng,
    data_rng: ChaCha8Rng,
    process: Option<LocalLmProcess>,
}

impl MixedStream {
    pub fn new(mix: TaskMix, seed: u64) -> Result<Self> {
        mix.validate()?;
        let choose = WeightedIndex::new(mix.weights).map_err(|e| Error::Config(e.to_string()))?;
        let process = if mix.weights[2] > 0.0 {
            Some(LocalLmProcess::new(mix.local_order, LOCAL_LM_TABLE_SEED)?)
        } else {
            None
        };
        Ok(Self {
            mix,
            choose,
            order_rng: rng(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x0de7),
            data_rng: rng(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0xda7a),
            process,
        })
    }
}

impl Iterator for MixedStream {
    type Item = TaskSample;

    fn next(&mut self) -> Option<TaskSample> {
        let task = TaskKind::ALL[self.choose.sample(&mut self.order_rng)];
        let seed = self.data_rng.gen();
        Some(
            self.mix
                .sample(task, seed, self.process.as_ref())
                .expect("validated mix produces valid samples"),
        )
    }
}

/// `mixed_stream(seed, weights)` with default lengths.
pub fn mixed_stream(seed: u64, weights: [f64; 3]) -> Result<MixedStream> {
    MixedStream::new(
        TaskMix {
            weights,
            ..TaskMix::default()
        },
        seed,
    )
}

pub fn write_jsonl<W: Write>(mut w: W, samples: &[TaskSample]) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<TaskSample>> {
    r.lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}
