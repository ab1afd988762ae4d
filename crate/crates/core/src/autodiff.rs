//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a Wengert list: every op appends a node holding its forward
//! value, its parents and whatever it needs for the backward pass. Nodes are
//! only ever appended, so index order is a topological order and
//! [`Graph::backward`] is a single reverse sweep.
//!
//! Every forward op checks its output for NaN/Inf and fails with
//! [`Error::NonFinite`] instead of letting it propagate.

use crate::attention::first_visible_key;
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRowBias(Var, Var),
    Sigmoid(Var),
    Gelu(Var),
    SteThreshold(Var),
    Softmax {
        x: Var,
        mask: Option<Vec<bool>>,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    Sum(Var),
    MeanOf(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        window: Option<usize>,
        probs: Vec<T>,
    },
    GateSelect {
        gate: Var,
        full: Var,
        local: Var,
        heads: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of recorded operations. One graph per forward computation.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

const RMS_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> (T, T) {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let one = T::one();
    let three = T::from_f64_lossy(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * c * (one + three * a * x * x);
    (y, dy)
}

/// Logistic function, clamped so outputs stay strictly inside (0, 1) even
/// where the exact value rounds to 0 or 1.
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    let one = T::one();
    let y = if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    };
    let top = one - T::epsilon() / T::from_f64_lossy(2.0);
    y.max(T::min_positive_value()).min(top)
}

/// Gradient accumulator for `v`, allocated on first use; `None` when `v`
/// takes no gradient.
fn grad_slot<'g, T: Scalar>(nodes: &[Node<T>], grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var], name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn map(&mut self, x: Var, op: Op<T>, name: &'static str, f: impl Fn(T) -> T) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(out, op, &[x], name)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<T>, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push(out, op, &[a, b], name)
    }

    /// `[p×q] · [q×r] -> [p×r]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = self.value(a).dims2("matmul")?;
        let (q2, r) = self.value(b).dims2("matmul")?;
        if q != q2 {
            return Err(shape_err("matmul", format!("[{p}x{q}] · [{q2}x{r}]")));
        }
        let mut out = vec![T::zero(); p * r];
        T::gemm(p, q, r, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        self.push(Tensor::new(vec![p, r], out)?, Op::MatMul(a, b), &[a, b], "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.map(x, Op::Scale(x, c), "scale", |v| v * c)
    }

    /// `x[n×k] + bias[k]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, k) = self.value(x).dims2("add_row_bias")?;
        if self.value(bias).shape() != [k] {
            return Err(shape_err(
                "add_row_bias",
                format!("bias {:?} for {k} columns", self.value(bias).shape()),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let xv = self.value(x);
        let data = xv
            .data()
            .chunks(k)
            .flat_map(|row| row.iter().zip(&b).map(|(&v, &bb)| v + bb))
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(out, Op::AddRowBias(x, bias), &[x, bias], "add_row_bias")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Sigmoid(x), "sigmoid", sigmoid_scalar)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Gelu(x), "gelu", |v| gelu(v).0)
    }

    /// Hard threshold `1[s > tau]` with an identity backward pass: the
    /// gradient reaching the output is copied unchanged onto `s`.
    pub fn ste_threshold(&mut self, s: Var, tau: T) -> Result<Var> {
        self.map(s, Op::SteThreshold(s), "ste_threshold", |v| {
            if v > tau {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    /// Softmax over the last axis. Masked (`false`) entries are excluded and
    /// come out as exactly zero.
    pub fn softmax_row(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let k = *xv.shape().last().ok_or_else(|| shape_err("softmax_row", "scalar input"))?;
        if let Some(m) = mask {
            if m.len() != xv.numel() {
                return Err(shape_err(
                    "softmax_row",
                    format!("mask of {} for {} elements", m.len(), xv.numel()),
                ));
            }
        }
        let mut out = vec![T::zero(); xv.numel()];
        for (row, (src, dst)) in xv.data().chunks(k).zip(out.chunks_mut(k)).enumerate() {
            let keep = |j: usize| mask.map_or(true, |m| m[row * k + j]);
            let max = (0..k)
                .filter(|&j| keep(j))
                .map(|j| src[j])
                .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.max(v))))
                .ok_or(Error::FullyMasked { row })?;
            let mut sum = T::zero();
            for j in (0..k).filter(|&j| keep(j)) {
                dst[j] = (src[j] - max).exp();
                sum += dst[j];
            }
            for v in dst.iter_mut() {
                *v = *v / sum;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let op = Op::Softmax {
            x,
            mask: mask.map(|m| m.to_vec()),
        };
        self.push(out, op, &[x], "softmax_row")
    }

    /// Root-mean-square normalization over the last axis of `x[n×d]`, scaled by `gain[d]`.
    pub fn rmsnorm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2("rmsnorm")?;
        if self.value(gain).shape() != [d] {
            return Err(shape_err("rmsnorm", "gain must match the last axis"));
        }
        let eps = T::from_f64_lossy(RMS_EPS);
        let dt = T::from_usize(d).unwrap();
        let g = self.value(gain).data();
        let xs = self.value(x).data();
        let mut inv_rms = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * d);
        for row in xs.chunks(d) {
            let ms = row.iter().map(|&v| v * v).sum::<T>() / dt;
            let r = T::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            out.extend(row.iter().zip(g).map(|(&v, &gg)| v * r * gg));
        }
        let out = Tensor::new(vec![n, d], out)?;
        self.push(out, Op::RmsNorm { x, gain, inv_rms }, &[x, gain], "rmsnorm")
    }

    /// Row lookup `table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.value(table).dims2("embedding")?;
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        self.push(out, op, &[table], "embedding")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2("transpose")?;
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xs[i * c + j];
            }
        }
        self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), &[x], "transpose")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x), &[x], "reshape")
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat_cols"))?;
        let (n, _) = self.value(*first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_cols")?;
            if r != n {
                return Err(shape_err("concat_cols", format!("row counts {n} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &c) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
            }
        }
        let out = Tensor::new(vec![n, total], out)?;
        self.push(out, Op::ConcatCols(parts.to_vec()), parts, "concat_cols")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.mean_of(&[x])
    }

    /// Mean over every element of every tensor in `xs`, as one scalar.
    pub fn mean_of(&mut self, xs: &[Var]) -> Result<Var> {
        let count: usize = xs.iter().map(|&x| self.value(x).numel()).sum();
        if count == 0 {
            return Err(Error::Empty("mean_of"));
        }
        let total: T = xs
            .iter()
            .flat_map(|&x| self.value(x).data().iter().copied())
            .sum();
        let out = Tensor::scalar(total / T::from_usize(count).unwrap());
        self.push(out, Op::MeanOf(xs.to_vec()), xs, "mean_of")
    }

    /// Mean next-token negative log-likelihood over rows where `loss_mask` is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], loss_mask: &[bool]) -> Result<Var> {
        let (n, vocab) = self.value(logits).dims2("cross_entropy")?;
        if targets.len() != n || loss_mask.len() != n {
            return Err(shape_err(
                "cross_entropy",
                format!("{n} rows, {} targets, {} mask entries", targets.len(), loss_mask.len()),
            ));
        }
        let count = loss_mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::NoLossPositions);
        }
        let zs = self.value(logits).data();
        let mut probs = vec![T::zero(); n * vocab];
        let mut total = T::zero();
        for i in (0..n).filter(|&i| loss_mask[i]) {
            let t = targets[i];
            if t >= vocab {
                return Err(Error::TokenOutOfRange { id: t, vocab });
            }
            let row = &zs[i * vocab..(i + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (p, &z) in probs[i * vocab..(i + 1) * vocab].iter_mut().zip(row) {
                *p = (z - max).exp();
                sum += *p;
            }
            for p in &mut probs[i * vocab..(i + 1) * vocab] {
                *p = *p / sum;
            }
            total += max + sum.ln() - row[t];
        }
        let loss = total / T::from_usize(count).unwrap();
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            mask: loss_mask.to_vec(),
            probs,
            count,
        };
        self.push(Tensor::scalar(loss), op, &[logits], "cross_entropy")
    }

    /// Multi-head causal scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[n × d]` with heads laid out as contiguous column
    /// blocks of width `d / heads`. Query `i` attends to keys
    /// `max(0, i+1-w) ..= i` when `window = Some(w)`, else to `0 ..= i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, window: Option<usize>) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let (n, d) = self.value(q).dims2("attention")?;
        if heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", format!("d={d} not divisible by {heads} heads")));
        }
        if window == Some(0) {
            return Err(Error::Invalid("attention window must be at least 1".into()));
        }
        let hd = d / heads;
        let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
        let (qs, ks, vs) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); heads * n * n];
        let mut out = vec![T::zero(); n * d];
        for h in 0..heads {
            let col = h * hd;
            for i in 0..n {
                let lo = first_visible_key(i, window);
                let qi = &qs[i * d + col..i * d + col + hd];
                let p = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
                let mut max = T::neg_infinity();
                for j in lo..=i {
                    let kj = &ks[j * d + col..j * d + col + hd];
                    let s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                    p[j] = s;
                    max = max.max(s);
                }
                let mut sum = T::zero();
                for pj in &mut p[lo..=i] {
                    *pj = (*pj - max).exp();
                    sum += *pj;
                }
                let oi = &mut out[i * d + col..i * d + col + hd];
                for j in lo..=i {
                    p[j] = p[j] / sum;
                    let vj = &vs[j * d + col..j * d + col + hd];
                    for (o, &vv) in oi.iter_mut().zip(vj) {
                        *o += p[j] * vv;
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, d], out)?;
        let op = Op::Attention {
            q,
            k,
            v,
            heads,
            window,
            probs,
        };
        self.push(out, op, &[q, k, v], "attention")
    }

    /// Per token-head choice between two attention outputs.
    ///
    /// `gate[n × heads]` must be exactly 0 or 1. Where the gate is 1 the head's
    /// output block is taken from `full`, otherwise from `local`. Backward
    /// differentiates the two branches of `g·full` / `(1-g)·local` separately:
    /// the gate receives `⟨dout, full⟩` where it is 1 and `-⟨dout, local⟩`
    /// where it is 0.
    pub fn gate_select(&mut self, gate: Var, full: Var, local: Var, heads: usize) -> Result<Var> {
        self.same_shape("gate_select", full, local)?;
        let (n, d) = self.value(full).dims2("gate_select")?;
        if heads == 0 || d % heads != 0 || self.value(gate).shape() != [n, heads] {
            return Err(shape_err(
                "gate_select",
                format!("gate {:?} for output [{n}x{d}] with {heads} heads", self.value(gate).shape()),
            ));
        }
        let g = self.value(gate).data();
        if g.iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(Error::Invalid("gate values must be exactly 0 or 1".into()));
        }
        let hd = d / heads;
        let (fs, ls) = (self.value(full).data(), self.value(local).data());
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            for h in 0..heads {
                let r = i * d + h * hd..i * d + (h + 1) * hd;
                if g[i * heads + h] == T::one() {
                    out.extend_from_slice(&fs[r]);
                } else {
                    out.extend_from_slice(&ls[r]);
                }
            }
        }
        let out = Tensor::new(vec![n, d], out)?;
        let op = Op::GateSelect {
            gate,
            full,
            local,
            heads,
        };
        self.push(out, op, &[gate, full, local], "gate_select")
    }

    /// Reverse sweep from a scalar `loss`, filling gradients for every node
    /// that depends on a `requires_grad` leaf. Fan-out accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape();
        if self.value(loss).numel() != 1 || shape.iter().any(|&s| s != 1) {
            return Err(Error::NotScalar(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dout) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &dout, &mut grads);
            grads[i] = Some(dout);
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(())
    }

    fn backprop_node(&self, i: usize, dout: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        macro_rules! with_grad {
            ($v:expr, |$g:ident| $body:block) => {
                if let Some($g) = grad_slot(nodes, grads, $v) {
                    $body
                }
            };
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (p, q) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let r = nodes[b.0].value.shape()[1];
                with_grad!(*a, |ga| {
                    T::gemm(p, r, q, dout, false, val(*b), true, ga, true);
                });
                with_grad!(*b, |gb| {
                    T::gemm(q, p, r, val(*a), true, dout, false, gb, true);
                });
            }
            Op::Add(a, b) => {
                with_grad!(*a, |ga| {
                    ga.iter_mut().zip(dout).for_each(|(g, &d)| *g += d);
                });
                with_grad!(*b, |gb| {
                    gb.iter_mut().zip(dout).for_each(|(g, &d)| *g += d);
                });
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |ga| {
                    ga.iter_mut().zip(dout).for_each(|(g, &d)| *g += d);
                });
                with_grad!(*b, |gb| {
                    gb.iter_mut().zip(dout).for_each(|(g, &d)| *g -= d);
                });
            }
            Op::Mul(a, b) => {
                if a == b {
                    with_grad!(*a, |ga| {
                        for ((g, &d), &x) in ga.iter_mut().zip(dout).zip(val(*a)) {
                            *g += d * (x + x);
                        }
                    });
                } else {
                    with_grad!(*a, |ga| {
                        for ((g, &d), &y) in ga.iter_mut().zip(dout).zip(val(*b)) {
                            *g += d * y;
                        }
                    });
                    with_grad!(*b, |gb| {
                        for ((g, &d), &x) in gb.iter_mut().zip(dout).zip(val(*a)) {
                            *g += d * x;
                        }
                    });
                }
            }
            Op::Scale(x, c) => {
                with_grad!(*x, |gx| {
                    gx.iter_mut().zip(dout).for_each(|(g, &d)| *g += d * *c);
                });
            }
            Op::AddRowBias(x, b) => {
                with_grad!(*x, |gx| {
                    gx.iter_mut().zip(dout).for_each(|(g, &d)| *g += d);
                });
                with_grad!(*b, |gb| {
                    let k = gb.len();
                    for row in dout.chunks(k) {
                        gb.iter_mut().zip(row).for_each(|(g, &d)| *g += d);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = nodes[i].value.data();
                with_grad!(*x, |gx| {
                    for ((g, &d), &s) in gx.iter_mut().zip(dout).zip(y) {
                        *g += d * s * (T::one() - s);
                    }
                });
            }
            Op::Gelu(x) => {
                with_grad!(*x, |gx| {
                    for ((g, &d), &xv) in gx.iter_mut().zip(dout).zip(val(*x)) {
                        *g += d * gelu(xv).1;
                    }
                });
            }
            Op::SteThreshold(s) => {
                with_grad!(*s, |gs| {
                    gs.iter_mut().zip(dout).for_each(|(g, &d)| *g += d);
                });
            }
            Op::Softmax { x, mask } => {
                let y = nodes[i].value.data();
                let k = *nodes[i].value.shape().last().unwrap();
                with_grad!(*x, |gx| {
                    for (row, ((gr, dr), yr)) in gx.chunks_mut(k).zip(dout.chunks(k)).zip(y.chunks(k)).enumerate() {
                        let dot: T = dr.iter().zip(yr).map(|(&d, &v)| d * v).sum();
                        for j in 0..k {
                            if mask.as_ref().map_or(true, |m| m[row * k + j]) {
                                gr[j] += yr[j] * (dr[j] - dot);
                            }
                        }
                    }
                });
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let d = nodes[gain.0].value.numel();
                let dt = T::from_usize(d).unwrap();
                let (xs, gs) = (val(*x), val(*gain));
                with_grad!(*gain, |gg| {
                    for ((xr, dr), &r) in xs.chunks(d).zip(dout.chunks(d)).zip(inv_rms) {
                        for j in 0..d {
                            gg[j] += dr[j] * xr[j] * r;
                        }
                    }
                });
                with_grad!(*x, |gx| {
                    for (((gr, xr), dr), &r) in gx.chunks_mut(d).zip(xs.chunks(d)).zip(dout.chunks(d)).zip(inv_rms) {
                        let dot: T = (0..d).map(|j| gs[j] * dr[j] * xr[j]).sum();
                        let c = r * r * r * dot / dt;
                        for j in 0..d {
                            gr[j] += r * gs[j] * dr[j] - c * xr[j];
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].value.shape()[1];
                with_grad!(*table, |gt| {
                    for (row, &id) in dout.chunks(d).zip(ids) {
                        gt[id * d..(id + 1) * d].iter_mut().zip(row).for_each(|(g, &v)| *g += v);
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                with_grad!(*x, |gx| {
                    for a in 0..r {
                        for b in 0..c {
                            gx[a * c + b] += dout[b * r + a];
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                with_grad!(*x, |gx| {
                    gx.iter_mut().zip(dout).for_each(|(g, &d)| *g += d);
                });
            }
            Op::ConcatCols(parts) => {
                let n = nodes[i].value.shape()[0];
                let total = nodes[i].value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let c = nodes[p.0].value.shape()[1];
                    with_grad!(p, |gp| {
                        for r in 0..n {
                            for j in 0..c {
                                gp[r * c + j] += dout[r * total + offset + j];
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::Sum(x) => {
                with_grad!(*x, |gx| {
                    gx.iter_mut().for_each(|g| *g += dout[0]);
                });
            }
            Op::MeanOf(xs) => {
                let count: usize = xs.iter().map(|x| nodes[x.0].value.numel()).sum();
                let d = dout[0] / T::from_usize(count).unwrap();
                for &x in xs {
                    with_grad!(x, |gx| {
                        gx.iter_mut().for_each(|g| *g += d);
                    });
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let vocab = nodes[logits.0].value.shape()[1];
                let c = dout[0] / T::from_usize(*count).unwrap();
                with_grad!(*logits, |gl| {
                    for r in (0..mask.len()).filter(|&r| mask[r]) {
                        let row = &mut gl[r * vocab..(r + 1) * vocab];
                        for (g, &p) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                            *g += c * p;
                        }
                        row[targets[r]] -= c;
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                window,
                probs,
            } => {
                self.attention_backward(dout, (*q, *k, *v), *heads, *window, probs, grads);
            }
            Op::GateSelect {
                gate,
                full,
                local,
                heads,
            } => {
                let (n, d) = (nodes[i].value.shape()[0], nodes[i].value.shape()[1]);
                let hd = d / heads;
                let g = val(*gate);
                with_grad!(*full, |gf| {
                    for r in 0..n {
                        for h in (0..*heads).filter(|&h| g[r * heads + h] == T::one()) {
                            let span = r * d + h * hd..r * d + (h + 1) * hd;
                            gf[span.clone()].iter_mut().zip(&dout[span]).for_each(|(a, &b)| *a += b);
                        }
                    }
                });
                with_grad!(*local, |gl| {
                    for r in 0..n {
                        for h in (0..*heads).filter(|&h| g[r * heads + h] == T::zero()) {
                            let span = r * d + h * hd..r * d + (h + 1) * hd;
                            gl[span.clone()].iter_mut().zip(&dout[span]).for_each(|(a, &b)| *a += b);
                        }
                    }
                });
                with_grad!(*gate, |gg| {
                    let (fs, ls) = (val(*full), val(*local));
                    for r in 0..n {
                        for h in 0..*heads {
                            let span = r * d + h * hd..r * d + (h + 1) * hd;
                            let du = &dout[span.clone()];
                            gg[r * heads + h] += if g[r * heads + h] == T::one() {
                                du.iter().zip(&fs[span]).map(|(&a, &b)| a * b).sum::<T>()
                            } else {
                                -du.iter().zip(&ls[span]).map(|(&a, &b)| a * b).sum::<T>()
                            };
                        }
                    }
                });
            }
        }
    }

    fn attention_backward(
        &self,
        dout: &[T],
        (q, k, v): (Var, Var, Var),
        heads: usize,
        window: Option<usize>,
        probs: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (n, d) = (self.value(q).shape()[0], self.value(q).shape()[1]);
        let hd = d / heads;
        let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
        let (qs, ks, vs) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![T::zero(); n * d];
        let mut dk = vec![T::zero(); n * d];
        let mut dv = vec![T::zero(); n * d];
        let mut ds = vec![T::zero(); n];
        for h in 0..heads {
            let col = h * hd;
            for i in 0..n {
                let lo = first_visible_key(i, window);
                let p = &probs[(h * n + i) * n..(h * n + i + 1) * n];
                let doi = &dout[i * d + col..i * d + col + hd];
                let mut dot = T::zero();
                for j in lo..=i {
                    let vj = &vs[j * d + col..j * d + col + hd];
                    let dp = doi.iter().zip(vj).map(|(&a, &b)| a * b).sum::<T>();
                    ds[j] = dp;
                    dot += p[j] * dp;
                    for (g, &o) in dv[j * d + col..j * d + col + hd].iter_mut().zip(doi) {
                        *g += p[j] * o;
                    }
                }
                let qi = &qs[i * d + col..i * d + col + hd];
                for j in lo..=i {
                    let s = p[j] * (ds[j] - dot) * scale;
                    let kj = &ks[j * d + col..j * d + col + hd];
                    for c in 0..hd {
                        dq[i * d + col + c] += s * kj[c];
                        dk[j * d + col + c] += s * qi[c];
                    }
                }
            }
        }
        for (var, g) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(buf) = grad_slot(&self.nodes, grads, var) {
                buf.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
            }
        }
    }
}
