//! Browser bindings for the routed-attention demo page.
//!
//! Every export takes plain numbers or strings and returns a JSON string, so
//! the page needs no bundler or generated type glue beyond `wasm-bindgen`.

use aha_core::analysis::{attention_gap, mu_f, per_head_usage, sorted_usage_curve, Gap, GateTrace};
use aha_core::attention::{router_scores, visibility_mask};
use aha_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn to_js<T: Serialize>(value: &T) -> Result<String, JsError> {
    serde_json::to_string(value).map_err(|e| JsError::new(&e.to_string()))
}

/// Parses a gate string such as `"1001 0110"`; whitespace is ignored.
pub fn parse_gates(text: &str) -> Result<Vec<bool>, String> {
    text.chars()
        .filter(|c| !c.is_whitespace())
        .map(|c| match c {
            '1' => Ok(true),
            '0' => Ok(false),
            other => Err(format!("gate strings use 0 and 1 only, found {other:?}")),
        })
        .collect()
}

#[derive(Serialize)]
pub struct MaskView {
    pub n: usize,
    pub window: usize,
    /// Row-major `[n × n]`: `mask[i * n + j]` is true when query `i` sees key `j`.
    pub mask: Vec<bool>,
    pub visible_keys: usize,
    /// Keys a fully dense causal head would see, for comparison.
    pub dense_keys: usize,
}

pub fn mask_view(gates: &[bool], window: usize) -> Result<MaskView, String> {
    if window == 0 {
        return Err("window must be at least 1".into());
    }
    let n = gates.len();
    let mask = visibility_mask(gates, window);
    Ok(MaskView {
        n,
        window,
        visible_keys: mask.iter().filter(|&&b| b).count(),
        dense_keys: n * (n + 1) / 2,
        mask,
    })
}

/// Which keys each query of one head attends to, given its per-token gates.
#[wasm_bindgen(js_name = attentionMask)]
pub fn attention_mask(gates: &str, window: usize) -> Result<String, JsError> {
    let gates = parse_gates(gates).map_err(|e| JsError::new(&e))?;
    to_js(&mask_view(&gates, window).map_err(|e| JsError::new(&e))?)
}

#[derive(Serialize)]
pub struct RouterView {
    pub n: usize,
    pub heads: usize,
    /// Row-major `[n × heads]`.
    pub scores: Vec<f64>,
    pub gates: Vec<bool>,
    pub mu_f: f64,
}

pub fn router_view(seed: u64, n: usize, dim: usize, heads: usize, bias: f64, weight_std: f64, threshold: f64) -> Result<RouterView, String> {
    if n == 0 || dim == 0 || heads == 0 {
        return Err("tokens, dim and heads must be positive".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Tensor<f64> = Tensor::randn(&[n, dim], 1.0, &mut rng);
    let w: Tensor<f64> = Tensor::randn(&[dim, heads], weight_std, &mut rng);
    let b: Tensor<f64> = Tensor::full(&[heads], bias);
    let scores = router_scores(&x, &w, &b).map_err(|e| e.to_string())?.into_data();
    let gates: Vec<bool> = scores.iter().map(|&s| s > threshold).collect();
    let trace = GateTrace::new(1, n, heads, gates.clone()).map_err(|e| e.to_string())?;
    let mu_f = mu_f(&[trace]).map_err(|e| e.to_string())?;
    Ok(RouterView { n, heads, scores, gates, mu_f })
}

/// Router scores and gates for random hidden states and router weights.
#[wasm_bindgen(js_name = routerDemo)]
pub fn router_demo(seed: u32, n: usize, dim: usize, heads: usize, bias: f64, weight_std: f64, threshold: f64) -> Result<String, JsError> {
    let view = router_view(seed as u64, n, dim, heads, bias, weight_std, threshold).map_err(|e| JsError::new(&e))?;
    to_js(&view)
}

#[derive(Serialize)]
pub struct HeadStats {
    pub head: usize,
    pub usage: f64,
    pub triggers: u64,
    pub gap: Gap,
}

#[derive(Serialize)]
pub struct GateStats {
    pub tokens: usize,
    pub mu_f: f64,
    /// Heads ordered by usage, highest first.
    pub heads: Vec<HeadStats>,
}

/// `rows` holds one gate string per head, all of the same length.
pub fn gate_stats_of(rows: &[Vec<bool>]) -> Result<GateStats, String> {
    let m = rows.len();
    let n = rows.first().map_or(0, Vec::len);
    if m == 0 || n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err("need at least one non-empty head row, all of equal length".into());
    }
    let gates = (0..n).flat_map(|i| rows.iter().map(move |r| r[i])).collect();
    let trace = GateTrace::new(1, n, m, gates).map_err(|e| e.to_string())?;
    let traces = [trace];
    let grid = per_head_usage(&traces).map_err(|e| e.to_string())?;
    let heads = sorted_usage_curve(&grid)
        .into_iter()
        .map(|h| {
            let g = attention_gap(rows[h.head].iter().copied());
            HeadStats {
                head: h.head,
                usage: h.usage,
                triggers: g.triggers,
                gap: g.gap,
            }
        })
        .collect();
    Ok(GateStats {
        tokens: n,
        mu_f: mu_f(&traces).map_err(|e| e.to_string())?,
        heads,
    })
}

/// Usage, attention gap and usage ranking for gate rows separated by newlines.
#[wasm_bindgen(js_name = gateStats)]
pub fn gate_stats(text: &str) -> Result<String, JsError> {
    let rows = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(parse_gates)
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| JsError::new(&e))?;
    to_js(&gate_stats_of(&rows).map_err(|e| JsError::new(&e))?)
}
