//! Full-attention usage statistics over recorded gate traces.
//!
//! All aggregates are computed from integer gate counts first, so the
//! fractions reported are a single correctly rounded division.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::attention::GateMatrix;
use crate::error::{Error, Result};
use crate::tasks::vocab;

pub const TRACE_MAGIC: &[u8; 4] = b"AHAT";
pub const TRACE_VERSION: u32 = 1;

/// Binary gates of every layer for one processed sequence.
///
/// `gates` is layer-major, then token, then head.
#[derive(Clone, Debug, PartialEq)]
pub struct GateTrace {
    pub num_layers: usize,
    pub n: usize,
    pub m: usize,
    pub gates: Vec<bool>,
    pub task: String,
    pub sample_id: u64,
    pub tokens: Option<Vec<usize>>,
    pub loss_mask: Option<Vec<bool>>,
}

impl GateTrace {
    pub fn new(num_layers: usize, n: usize, m: usize, gates: Vec<bool>) -> Result<Self> {
        if gates.len() != num_layers * n * m {
            return Err(Error::Invalid(format!(
                "{} gates for L={num_layers}, n={n}, m={m}",
                gates.len()
            )));
        }
        Ok(Self {
            num_layers,
            n,
            m,
            gates,
            task: String::new(),
            sample_id: 0,
            tokens: None,
            loss_mask: None,
        })
    }

    pub fn from_layers(layers: &[GateMatrix], task: &str, sample_id: u64) -> Result<Self> {
        let first = layers.first().ok_or(Error::Empty("gate layers"))?;
        let (n, m) = (first.n, first.m);
        if layers.iter().any(|l| l.n != n || l.m != m) {
            return Err(Error::Invalid("layers disagree on n or m".into()));
        }
        let gates = layers.iter().flat_map(|l| l.gates.iter().copied()).collect();
        let mut t = Self::new(layers.len(), n, m, gates)?;
        t.task = task.to_string();
        t.sample_id = sample_id;
        Ok(t)
    }

    pub fn with_tokens(mut self, tokens: Vec<usize>, loss_mask: Vec<bool>) -> Self {
        self.tokens = Some(tokens);
        self.loss_mask = Some(loss_mask);
        self
    }

    pub fn gate(&self, layer: usize, token: usize, head: usize) -> bool {
        self.gates[(layer * self.n + token) * self.m + head]
    }

    pub fn ones(&self) -> u64 {
        self.gates.iter().filter(|&&g| g).count() as u64
    }

    pub fn entries(&self) -> u64 {
        self.gates.len() as u64
    }

    /// Gate sequence of one head over the tokens.
    pub fn head_series(&self, layer: usize, head: usize) -> impl Iterator<Item = bool> + '_ {
        (0..self.n).map(move |i| self.gate(layer, i, head))
    }

    /// Per-token usage averaged over layers and heads.
    pub fn per_token_usage(&self) -> Vec<f64> {
        let denom = (self.num_layers * self.m) as f64;
        (0..self.n)
            .map(|i| {
                let on = (0..self.num_layers)
                    .flat_map(|l| (0..self.m).map(move |h| (l, h)))
                    .filter(|&(l, h)| self.gate(l, i, h))
                    .count();
                on as f64 / denom
            })
            .collect()
    }
}

/// Fraction of open gates over all layers, heads and tokens of all traces.
pub fn mu_f(traces: &[GateTrace]) -> Result<f64> {
    let (ones, total) = traces
        .iter()
        .fold((0u64, 0u64), |(o, t), tr| (o + tr.ones(), t + tr.entries()));
    if total == 0 {
        return Err(Error::Empty("gate traces"));
    }
    Ok(ones as f64 / total as f64)
}

/// [`mu_f`] restricted to token positions selected by `keep(trace_index, token)`.
pub fn mu_f_where(traces: &[GateTrace], keep: impl Fn(usize, usize) -> bool) -> Result<f64> {
    let mut ones = 0u64;
    let mut total = 0u64;
    for (t, tr) in traces.iter().enumerate() {
        for i in (0..tr.n).filter(|&i| keep(t, i)) {
            for l in 0..tr.num_layers {
                for h in 0..tr.m {
                    ones += tr.gate(l, i, h) as u64;
                    total += 1;
                }
            }
        }
    }
    if total == 0 {
        return Err(Error::Empty("selected gate positions"));
    }
    Ok(ones as f64 / total as f64)
}

/// Per (layer, head) usage with the underlying counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadGrid {
    pub num_layers: usize,
    pub num_heads: usize,
    /// Open-gate counts, `num_layers × num_heads` row-major.
    pub ones: Vec<u64>,
    /// Tokens observed by every head.
    pub tokens: u64,
}

impl HeadGrid {
    pub fn usage(&self, layer: usize, head: usize) -> f64 {
        self.ones[layer * self.num_heads + head] as f64 / self.tokens as f64
    }

    pub fn values(&self) -> Vec<f64> {
        self.ones.iter().map(|&o| o as f64 / self.tokens as f64).collect()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.num_layers)
            .map(|l| (0..self.num_heads).map(|h| self.usage(l, h)).collect())
            .collect()
    }

    pub fn from_values(rows: &[Vec<f64>]) -> Self {
        // Fractional grid given directly; stored as counts over 2^32 tokens.
        let scale = 1u64 << 32;
        Self {
            num_layers: rows.len(),
            num_heads: rows.first().map_or(0, |r| r.len()),
            ones: rows
                .iter()
                .flatten()
                .map(|&v| (v * scale as f64).round() as u64)
                .collect(),
            tokens: scale,
        }
    }

    pub fn mean(&self) -> f64 {
        self.ones.iter().sum::<u64>() as f64 / (self.tokens * self.ones.len() as u64) as f64
    }

    /// CSV matrix: one row per layer, one column per head.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer");
        for h in 0..self.num_heads {
            s.push_str(&format!(",head{h}"));
        }
        s.push('\n');
        for (l, row) in self.rows().iter().enumerate() {
            s.push_str(&l.to_string());
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

fn check_uniform(traces: &[GateTrace]) -> Result<(usize, usize)> {
    let first = traces.first().ok_or(Error::Empty("gate traces"))?;
    let (l, m) = (first.num_layers, first.m);
    if traces.iter().any(|t| t.num_layers != l || t.m != m) {
        return Err(Error::Invalid("traces disagree on layer or head count".into()));
    }
    Ok((l, m))
}

pub fn per_head_usage(traces: &[GateTrace]) -> Result<HeadGrid> {
    let (num_layers, num_heads) = check_uniform(traces)?;
    let mut ones = vec![0u64; num_layers * num_heads];
    let mut tokens = 0u64;
    for tr in traces {
        tokens += tr.n as u64;
        for l in 0..num_layers {
            for i in 0..tr.n {
                for h in 0..num_heads {
                    ones[l * num_heads + h] += tr.gate(l, i, h) as u64;
                }
            }
        }
    }
    if tokens == 0 {
        return Err(Error::Empty("gate traces"));
    }
    Ok(HeadGrid {
        num_layers,
        num_heads,
        ones,
        tokens,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadUsage {
    pub layer: usize,
    pub head: usize,
    pub usage: f64,
}

/// Heads by descending usage; ties keep (layer, head) order.
pub fn sorted_usage_curve(grid: &HeadGrid) -> Vec<HeadUsage> {
    let mut curve: Vec<HeadUsage> = (0..grid.num_layers)
        .flat_map(|l| (0..grid.num_heads).map(move |h| (l, h)))
        .map(|(layer, head)| HeadUsage {
            layer,
            head,
            usage: grid.usage(layer, head),
        })
        .collect();
    curve.sort_by(|a, b| b.usage.total_cmp(&a.usage));
    curve
}

/// Share of total usage held by the top `fraction` of heads (at least one).
pub fn top_heads_mass(curve: &[HeadUsage], fraction: f64) -> f64 {
    let total: f64 = curve.iter().map(|h| h.usage).sum();
    if total == 0.0 {
        return 0.0;
    }
    let k = ((curve.len() as f64 * fraction).ceil() as usize).clamp(1, curve.len());
    curve[..k].iter().map(|h| h.usage).sum::<f64>() / total
}

pub fn sorted_curve_csv(curve: &[HeadUsage]) -> String {
    let mut s = String::from("rank,layer,head,usage\n");
    for (r, h) in curve.iter().enumerate() {
        s.push_str(&format!("{r},{},{},{}\n", h.layer, h.head, h.usage));
    }
    s
}

/// Mean tokens per full-attention trigger; infinite when the head never fires.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Gap {
    Finite(f64),
    Infinite,
}

impl Gap {
    pub fn value(self) -> f64 {
        match self {
            Gap::Finite(v) => v,
            Gap::Infinite => f64::INFINITY,
        }
    }
}

impl fmt::Display for Gap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Gap::Finite(v) => write!(f, "{v}"),
            Gap::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for Gap {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Gap::Finite(v) => s.serialize_f64(*v),
            Gap::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Gap {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(Gap::Finite(v)),
            Repr::Str(s) if s == "inf" => Ok(Gap::Infinite),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("bad gap {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadGap {
    pub tokens: u64,
    pub triggers: u64,
    pub gap: Gap,
}

/// `tokens / triggers` over one head's gate stream.
pub fn attention_gap(gates: impl IntoIterator<Item = bool>) -> HeadGap {
    let (mut tokens, mut triggers) = (0u64, 0u64);
    for g in gates {
        tokens += 1;
        triggers += g as u64;
    }
    let gap = if triggers == 0 {
        Gap::Infinite
    } else {
        Gap::Finite(tokens as f64 / triggers as f64)
    };
    HeadGap { tokens, triggers, gap }
}

/// Gap per (layer, head), treating the traces as one concatenated stream.
pub fn head_gaps(traces: &[GateTrace]) -> Result<Vec<Vec<HeadGap>>> {
    let (num_layers, num_heads) = check_uniform(traces)?;
    Ok((0..num_layers)
        .map(|l| {
            (0..num_heads)
                .map(|h| attention_gap(traces.iter().flat_map(|t| t.head_series(l, h))))
                .collect()
        })
        .collect())
}

pub fn gaps_csv(gaps: &[Vec<HeadGap>]) -> String {
    let mut s = String::from("layer,head,tokens,triggers,gap\n");
    for (l, row) in gaps.iter().enumerate() {
        for (h, g) in row.iter().enumerate() {
            s.push_str(&format!("{l},{h},{},{},{}\n", g.tokens, g.triggers, g.gap));
        }
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub id: usize,
    pub symbol: String,
    pub usage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenTrace {
    pub task: String,
    pub sample_id: u64,
    pub tokens: Vec<TokenUsage>,
    pub average: f64,
}

pub fn token_trace_export(per_token: &[f64], tokens: &[usize]) -> Result<TokenTrace> {
    if per_token.len() != tokens.len() {
        return Err(Error::Invalid(format!(
            "{} usage values for {} tokens",
            per_token.len(),
            tokens.len()
        )));
    }
    if tokens.is_empty() {
        return Err(Error::Empty("token trace"));
    }
    let average = per_token.iter().sum::<f64>() / per_token.len() as f64;
    Ok(TokenTrace {
        task: String::new(),
        sample_id: 0,
        tokens: tokens
            .iter()
            .zip(per_token)
            .map(|(&id, &usage)| TokenUsage {
                id,
                symbol: vocab::symbol(id),
                usage,
            })
            .collect(),
        average,
    })
}

/// Aggregate usage statistics over a set of traces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UsageReport {
    pub num_traces: usize,
    pub total_tokens: u64,
    pub mu_f_overall: f64,
    /// Usage restricted to scored (answer / continuation) positions, when masks are known.
    pub mu_f_loss_positions: Option<f64>,
    pub per_head: Vec<Vec<f64>>,
    /// Position-wise usage averaged over traces that reach that position.
    pub per_token: Vec<f64>,
    pub gaps: Vec<Vec<HeadGap>>,
}

impl UsageReport {
    pub fn from_traces(traces: &[GateTrace]) -> Result<Self> {
        let grid = per_head_usage(traces)?;
        let max_n = traces.iter().map(|t| t.n).max().unwrap_or(0);
        let mut sums = vec![0.0; max_n];
        let mut counts = vec![0usize; max_n];
        for t in traces {
            for (i, u) in t.per_token_usage().into_iter().enumerate() {
                sums[i] += u;
                counts[i] += 1;
            }
        }
        let masked = if traces.iter().all(|t| t.loss_mask.is_some()) {
            mu_f_where(traces, |t, i| traces[t].loss_mask.as_ref().unwrap()[i]).ok()
        } else {
            None
        };
        Ok(Self {
            num_traces: traces.len(),
            total_tokens: grid.tokens,
            mu_f_overall: mu_f(traces)?,
            mu_f_loss_positions: masked,
            per_head: grid.rows(),
            per_token: sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect(),
            gaps: head_gaps(traces)?,
        })
    }
}

/// Expected direction of usage along a sweep axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trend {
    StrictlyDecreasing,
    NonIncreasing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis_value: f64,
    pub mu_f: f64,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: String,
    pub trend: Trend,
    pub rows: Vec<SweepRow>,
    /// Axis values `(a, b)` of consecutive rows that break the trend.
    pub violations: Vec<(f64, f64)>,
}

impl SweepReport {
    pub fn new(axis: &str, trend: Trend, mut rows: Vec<SweepRow>) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::Invalid("a sweep needs at least two points".into()));
        }
        rows.sort_by(|a, b| a.axis_value.total_cmp(&b.axis_value));
        let violations = rows
            .windows(2)
            .filter(|p| match trend {
                Trend::StrictlyDecreasing => p[1].mu_f >= p[0].mu_f,
                Trend::NonIncreasing => p[1].mu_f > p[0].mu_f,
            })
            .map(|p| (p[0].axis_value, p[1].axis_value))
            .collect();
        Ok(Self {
            axis: axis.to_string(),
            trend,
            rows,
            violations,
        })
    }

    pub fn is_monotone(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{},mu_f,accuracy,violation\n", self.axis);
        for (i, r) in self.rows.iter().enumerate() {
            let flagged = i > 0
                && self
                    .violations
                    .iter()
                    .any(|&(_, b)| b == r.axis_value);
            let acc = r.accuracy.map_or(String::new(), |a| a.to_string());
            s.push_str(&format!("{},{},{},{}\n", r.axis_value, r.mu_f, acc, flagged as u8));
        }
        s
    }
}

/// Window sweep: usage is expected to fall strictly as the window grows.
pub fn window_sweep_report(rows: Vec<SweepRow>) -> Result<SweepReport> {
    SweepReport::new("w", Trend::StrictlyDecreasing, rows)
}

/// Penalty sweep: usage is expected not to rise as the penalty grows.
pub fn lambda_sweep_report(rows: Vec<SweepRow>) -> Result<SweepReport> {
    SweepReport::new("lambda", Trend::NonIncreasing, rows)
}

#[derive(Serialize, Deserialize)]
struct TraceHeader {
    version: u32,
    #[serde(rename = "L")]
    num_layers: usize,
    n: usize,
    m: usize,
    task: String,
    sample_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tokens: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    loss_mask: Option<Vec<bool>>,
}

/// Trace file layout: `AHAT`, header length (u32 LE), JSON header, then one
/// bit row per (layer, head): `n` bits LSB-first, padded to whole bytes.
pub fn write_trace<W: Write>(mut w: W, trace: &GateTrace) -> Result<()> {
    let header = TraceHeader {
        version: TRACE_VERSION,
        num_layers: trace.num_layers,
        n: trace.n,
        m: trace.m,
        task: trace.task.clone(),
        sample_id: trace.sample_id,
        tokens: trace.tokens.clone(),
        loss_mask: trace.loss_mask.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(TRACE_MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let row_bytes = trace.n.div_ceil(8);
    for l in 0..trace.num_layers {
        for h in 0..trace.m {
            let mut row = vec![0u8; row_bytes];
            for (i, g) in trace.head_series(l, h).enumerate() {
                if g {
                    row[i / 8] |= 1 << (i % 8);
                }
            }
            w.write_all(&row)?;
        }
    }
    Ok(())
}

pub fn read_trace<R: Read>(mut r: R) -> Result<GateTrace> {
    let corrupt = |m: &str| Error::Corrupt(m.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| corrupt("truncated magic"))?;
    if &magic != TRACE_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(|_| corrupt("truncated header length"))?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json).map_err(|_| corrupt("truncated header"))?;
    let h: TraceHeader = serde_json::from_slice(&json).map_err(|e| Error::Corrupt(format!("header: {e}")))?;
    if h.version != TRACE_VERSION {
        return Err(Error::Corrupt(format!("unsupported trace version {}", h.version)));
    }
    let row_bytes = h.n.div_ceil(8);
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != row_bytes * h.num_layers * h.m {
        return Err(corrupt("payload size does not match header"));
    }
    let mut gates = vec![false; h.num_layers * h.n * h.m];
    for l in 0..h.num_layers {
        for head in 0..h.m {
            let row = &payload[(l * h.m + head) * row_bytes..][..row_bytes];
            for i in 0..h.n {
                gates[(l * h.n + i) * h.m + head] = row[i / 8] >> (i % 8) & 1 == 1;
            }
        }
    }
    let mut t = GateTrace::new(h.num_layers, h.n, h.m, gates)?;
    t.task = h.task;
    t.sample_id = h.sample_id;
    t.tokens = h.tokens;
    t.loss_mask = h.loss_mask;
    Ok(t)
}

pub fn save_trace(path: &Path, trace: &GateTrace) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_trace(f, trace)
}

pub fn load_trace(path: &Path) -> Result<GateTrace> {
    read_trace(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trace(l: usize, n: usize, m: usize, gates: Vec<bool>) -> GateTrace {
        GateTrace::new(l, n, m, gates).unwrap()
    }

    #[test]
    fn mu_f_examples() {
        assert_eq!(mu_f(&[trace(1, 3, 2, vec![true; 6])]).unwrap(), 1.0);
        let mut g = vec![false; 12];
        g[1] = true;
        g[5] = true;
        g[10] = true;
        assert_eq!(mu_f(&[trace(2, 3, 2, g)]).unwrap(), 0.25);
        assert!(mu_f(&[]).is_err());
    }

    #[test]
    fn always_on_head_shows_in_grid() {
        let (l, n, m) = (2, 5, 3);
        let mut g = vec![false; l * n * m];
        for i in 0..n {
            g[(n + i) * m + 2] = true;
        }
        let grid = per_head_usage(&[trace(l, n, m, g)]).unwrap();
        assert_eq!(grid.usage(1, 2), 1.0);
        assert_eq!(grid.ones.iter().sum::<u64>(), n as u64);
        assert!((grid.mean() - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn sorted_curve_breaks_ties_by_index() {
        let grid = HeadGrid::from_values(&[vec![0.1, 0.9], vec![0.5, 0.5]]);
        let curve = sorted_usage_curve(&grid);
        let order: Vec<(usize, usize)> = curve.iter().map(|h| (h.layer, h.head)).collect();
        assert_eq!(order, vec![(0, 1), (1, 0), (1, 1), (0, 0)]);
        let usage: Vec<f64> = curve.iter().map(|h| (h.usage * 10.0).round() / 10.0).collect();
        assert_eq!(usage, vec![0.9, 0.5, 0.5, 0.1]);
    }

    #[test]
    fn gap_examples() {
        let g = attention_gap(vec![true; 100]);
        assert_eq!(g.gap, Gap::Finite(1.0));
        let g = attention_gap([true, false, false, true, false, true]);
        assert_eq!((g.tokens, g.triggers, g.gap), (6, 3, Gap::Finite(2.0)));
        let g = attention_gap(vec![false; 7]);
        assert_eq!((g.triggers, g.gap), (0, Gap::Infinite));
        assert_eq!(g.gap.to_string(), "inf");
        let json = serde_json::to_string(&g).unwrap();
        assert_eq!(serde_json::from_str::<HeadGap>(&json).unwrap(), g);
    }

    #[test]
    fn token_trace_average() {
        let t = token_trace_export(&[0.0, 0.0, 0.0], &[11, 1, 10]).unwrap();
        assert_eq!(t.average, 0.0);
        assert_eq!(t.tokens[1].symbol, "1");
        let t = token_trace_export(&[0.25, 0.5, 1.0], &[1, 2, 3]).unwrap();
        assert!((t.average - 1.75 / 3.0).abs() < 1e-15);
        assert!(token_trace_export(&[0.5], &[1, 2]).is_err());
    }

    #[test]
    fn sweep_monotonicity() {
        let rows = |v: &[(f64, f64)]| {
            v.iter()
                .map(|&(a, m)| SweepRow {
                    axis_value: a,
                    mu_f: m,
                    accuracy: None,
                })
                .collect::<Vec<_>>()
        };
        let r = window_sweep_report(rows(&[(4.0, 0.9), (8.0, 0.5), (16.0, 0.2)])).unwrap();
        assert!(r.is_monotone());
        let r = window_sweep_report(rows(&[(4.0, 0.9), (8.0, 0.95), (16.0, 0.2)])).unwrap();
        assert_eq!(r.violations, vec![(4.0, 8.0)]);
        assert!(r.to_csv().contains("8,0.95,,1"));
        let r = lambda_sweep_report(rows(&[(0.0, 0.9), (0.1, 0.9)])).unwrap();
        assert!(r.is_monotone());
        assert!(window_sweep_report(rows(&[(4.0, 0.9)])).is_err());
    }

    #[test]
    fn corrupt_trace_is_rejected() {
        let t = trace(1, 9, 2, vec![true; 18]);
        let mut buf = Vec::new();
        write_trace(&mut buf, &t).unwrap();
        assert!(read_trace(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_trace(bad.as_slice()), Err(Error::Corrupt(_))));
    }

    proptest! {
        #[test]
        fn trace_file_round_trips(
            l in 1usize..4, n in 1usize..20, m in 1usize..5,
            bits in proptest::collection::vec(any::<bool>(), 240),
            id in any::<u64>(),
        ) {
            let mut t = trace(l, n, m, bits[..l * n * m].to_vec());
            t.task = "needle".into();
            t.sample_id = id;
            let mut buf = Vec::new();
            write_trace(&mut buf, &t).unwrap();
            prop_assert_eq!(read_trace(buf.as_slice()).unwrap(), t);
        }

        #[test]
        fn sorted_curve_is_a_permutation(ones in proptest::collection::vec(0u64..50, 6)) {
            let grid = HeadGrid { num_layers: 2, num_heads: 3, ones: ones.clone(), tokens: 50 };
            let curve = sorted_usage_curve(&grid);
            let mut a: Vec<u64> = curve.iter().map(|h| grid.ones[h.layer * 3 + h.head]).collect();
            let mut b = ones;
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
            prop_assert!(curve.windows(2).all(|w| w[0].usage >= w[1].usage));
        }
    }
}
