//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each operation appends a
//! node holding its output value and whatever activations the backward pass
//! needs; nodes are therefore always in topological order and
//! [`Graph::backward`] is a single reverse sweep that visits every node once.
//!
//! Shapes follow one convention: the last dimension is the column dimension
//! and all leading dimensions are folded into rows. There is no implicit
//! broadcasting; the only row-broadcast operations are [`Graph::add_bias`]
//! and [`Graph::layer_norm`], which apply a per-column vector to every row.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::kernels::{matmul_acc, matmul_nt_acc, matmul_tn_acc};
use crate::params::{ParamId, ParamStore};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    GatherRows {
        src: Var,
        rows: Vec<usize>,
    },
    ScatterRows {
        src: Var,
        rows: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    MulRows(Var, Var),
    PickColumn {
        src: Var,
        rows: Vec<usize>,
        col: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        keep: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    TopKRenorm {
        probs: Var,
        kept: Vec<bool>,
        sums: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    CvSquared(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Dynamic tape of recorded operations.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(Var, ParamId)>,
    dropout: Option<Rng>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

const CV_EPS: f64 = 1e-10;

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: Vec::new(),
            dropout: None,
            grad_enabled: true,
        }
    }

    /// Graph for inference: no leaf requires a gradient.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Enables dropout (train mode) with an explicit seed.
    pub fn with_dropout_seed(mut self, seed: u64) -> Self {
        self.dropout = Some(rng::seeded(seed));
        self
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it is differentiable iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = self.grad_enabled && tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a parameter leaf whose gradient can later be pushed back into
    /// the store with [`Graph::accumulate_param_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid shape");
        let needs_grad = self.grad_enabled && t.requires_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        let var = Var(self.nodes.len() - 1);
        self.params.push((var, id));
        var
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Gradient of the last backward target with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Saved attention weights `[heads × T × T]` of an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Fails with a numeric error naming `what` if the value holds NaN/Inf.
    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(String::from(what)))
        }
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    // ----- operations -------------------------------------------------------

    /// `[m×k] · [k×n] → [m×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul {:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `[m×k] · [n×k]ᵀ → [m×n]`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::Shape(format!("matmul_bt {:?} x {:?}ᵀ", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMulBt(a, b), &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.data(a).iter().map(|x| x * c).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(a, c), &[a])
    }

    /// Adds a `[n]` bias to every row of a `[...×n]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.shape(bias) != [n] {
            return Err(Error::Shape(format!(
                "bias {:?} for rows of width {n}",
                self.shape(bias)
            )));
        }
        let b = self.data(bias);
        let mut data = self.data(x).to_vec();
        for row in data.chunks_exact_mut(n) {
            for (y, bv) in row.iter_mut().zip(b) {
                *y += bv;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::AddBias(x, bias), &[x, bias]))
    }

    /// `x·W + b` with `W` stored `[in×out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| gelu(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(value, Op::Gelu(x), &[x])
    }

    /// Softmax along the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let n = self.value(x).cols();
        let mut data = self.data(x).to_vec();
        for row in data.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Per-row normalization to zero mean / unit variance followed by the
    /// affine map `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = self.value(x).cols();
        if n == 0 {
            return Err(Error::Shape("layer_norm over an empty axis".into()));
        }
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::Shape(format!(
                "layer_norm gain {:?} / bias {:?} for width {n}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let rows = self.value(x).rows();
        let mut xhat = vec![0.0; rows * n];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        let (g, b) = (self.data(gain), self.data(bias));
        for (r, row) in self.data(x).chunks_exact(n).enumerate() {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / libm::sqrt(var + eps);
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Row lookup: output row `i` is `src[rows[i]]`. Used for embedding
    /// tables; the backward pass scatters into the table.
    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(src);
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::IndexOutOfRange {
                    field: "row",
                    index: r,
                    bound: m,
                });
            }
            data.extend_from_slice(self.value(src).row(r));
        }
        let value = Tensor::new(vec![rows.len(), n], data)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                src,
                rows: rows.to_vec(),
            },
            &[src],
        ))
    }

    /// Adds row `i` of `src` into row `rows[i]` of a zero `[out_rows × n]`.
    pub fn scatter_rows(&mut self, src: Var, rows: &[usize], out_rows: usize) -> Result<Var> {
        let (m, n) = self.dims2(src);
        if m != rows.len() {
            return Err(Error::LengthMismatch(m, rows.len()));
        }
        let mut data = vec![0.0; out_rows * n];
        for (i, &r) in rows.iter().enumerate() {
            if r >= out_rows {
                return Err(Error::IndexOutOfRange {
                    field: "row",
                    index: r,
                    bound: out_rows,
                });
            }
            for (y, x) in data[r * n..(r + 1) * n]
                .iter_mut()
                .zip(self.value(src).row(i))
            {
                *y += x;
            }
        }
        let value = Tensor::new(vec![out_rows, n], data)?;
        Ok(self.push(
            value,
            Op::ScatterRows {
                src,
                rows: rows.to_vec(),
            },
            &[src],
        ))
    }

    /// Concatenates 2-D tensors with equal row counts along the columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.dims2(p).0)
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p);
            if r != rows || self.shape(p).len() != 2 {
                return Err(Error::Shape(format!("concat part {:?}", self.shape(p))));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Scales row `i` of `x [m×n]` by `w[i]` (`w` has shape `[m]`).
    pub fn mul_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if self.shape(w) != [m] {
            return Err(Error::Shape(format!(
                "row weights {:?} for {m} rows",
                self.shape(w)
            )));
        }
        let mut data = self.data(x).to_vec();
        for (row, s) in data.chunks_exact_mut(n).zip(self.data(w)) {
            for y in row {
                *y *= s;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::MulRows(x, w), &[x, w]))
    }

    /// Picks `src[rows[i], col]` into a `[rows.len()]` vector.
    pub fn pick_column(&mut self, src: Var, rows: &[usize], col: usize) -> Result<Var> {
        let (m, n) = self.dims2(src);
        if col >= n {
            return Err(Error::IndexOutOfRange {
                field: "column",
                index: col,
                bound: n,
            });
        }
        let mut data = Vec::with_capacity(rows.len());
        for &r in rows {
            if r >= m {
                return Err(Error::IndexOutOfRange {
                    field: "row",
                    index: r,
                    bound: m,
                });
            }
            data.push(self.data(src)[r * n + col]);
        }
        let value = Tensor::vector(data);
        Ok(self.push(
            value,
            Op::PickColumn {
                src,
                rows: rows.to_vec(),
                col,
            },
            &[src],
        ))
    }

    /// Inverted dropout. Identity unless the graph was built with a dropout
    /// seed (train mode) and `p > 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        let Some(rng) = self.dropout.as_mut().filter(|_| p > 0.0) else {
            return x;
        };
        let keep = 1.0 / (1.0 - p);
        let n = self.nodes[x.0].value.numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(value, Op::Dropout { x, mask }, &[x])
    }

    /// Multi-head scaled dot-product attention over `[T×H]` projections.
    ///
    /// Per head, scores are `Q_h K_hᵀ / √d_k`; keys with `key_mask[j] == false`
    /// get weight exactly zero. A row whose every key is masked outputs zero.
    /// Head outputs are written back into their column slots, so the result is
    /// the concatenation of heads (the output projection is separate).
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_mask: &[bool],
    ) -> Result<Var> {
        let (t, h) = self.dims2(q);
        if self.shape(q).len() != 2 || self.shape(k) != [t, h] || self.shape(v) != [t, h] {
            return Err(Error::Shape(format!(
                "attention q {:?} k {:?} v {:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        if heads == 0 || h % heads != 0 {
            return Err(Error::Shape(format!("hidden {h} not divisible by {heads} heads")));
        }
        if key_mask.len() != t {
            return Err(Error::LengthMismatch(key_mask.len(), t));
        }
        let dk = h / heads;
        let scale = 1.0 / libm::sqrt(dk as f64);
        let mut probs = vec![0.0; heads * t * t];
        let mut out = vec![0.0; t * h];
        for head in 0..heads {
            let qh = columns(self.data(q), t, h, head * dk, dk);
            let kh = columns(self.data(k), t, h, head * dk, dk);
            let vh = columns(self.data(v), t, h, head * dk, dk);
            let p = &mut probs[head * t * t..(head + 1) * t * t];
            matmul_nt_acc(&qh, &kh, p, t, dk, t);
            for row in p.chunks_exact_mut(t) {
                masked_softmax_in_place(row, key_mask, scale);
            }
            let mut oh = vec![0.0; t * dk];
            matmul_acc(p, &vh, &mut oh, t, t, dk);
            write_columns(&mut out, &oh, t, h, head * dk, dk);
        }
        let value = Tensor::new(vec![t, h], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Mean of `-log softmax(logits)[target]` over rows with `keep[i]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], keep: &[bool]) -> Result<Var> {
        let (b, v) = self.dims2(logits);
        if targets.len() != b || keep.len() != b {
            return Err(Error::LengthMismatch(targets.len().max(keep.len()), b));
        }
        let count = keep.iter().filter(|&&k| k).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let mut probs = vec![0.0; b * v];
        let mut total = 0.0;
        for (i, row) in self.data(logits).chunks_exact(v).enumerate() {
            if !keep[i] {
                continue;
            }
            if targets[i] >= v {
                return Err(Error::IndexOutOfRange {
                    field: "target",
                    index: targets[i],
                    bound: v,
                });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[i * v..(i + 1) * v];
            let mut sum = 0.0;
            for (pj, &l) in p.iter_mut().zip(row) {
                *pj = libm::exp(l - max);
                sum += *pj;
            }
            for pj in p.iter_mut() {
                *pj /= sum;
            }
            total += max + libm::log(sum) - row[targets[i]];
        }
        let value = Tensor::scalar(total / count as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                keep: keep.to_vec(),
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Keeps the `top_k` largest entries of each row of a probability matrix
    /// (ties go to the lower column index), zeroes the rest and renormalizes
    /// the kept entries to sum to one. With `top_k` equal to the row width
    /// the input passes through unchanged.
    pub fn top_k_renorm(&mut self, probs: Var, top_k: usize) -> Result<Var> {
        let (m, n) = self.dims2(probs);
        if top_k == 0 || top_k > n {
            return Err(Error::Config(format!("top_k {top_k} outside 1..={n}")));
        }
        let mut kept = vec![false; m * n];
        let mut sums = vec![1.0; m];
        let mut out = vec![0.0; m * n];
        for (r, row) in self.data(probs).chunks_exact(n).enumerate() {
            if top_k == n {
                kept[r * n..(r + 1) * n].fill(true);
                out[r * n..(r + 1) * n].copy_from_slice(row);
                continue;
            }
            let chosen = top_k_indices(row, top_k);
            let s: f64 = chosen.iter().map(|&j| row[j]).sum();
            sums[r] = s;
            for &j in &chosen {
                kept[r * n + j] = true;
                out[r * n + j] = row[j] / s;
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::TopKRenorm { probs, kept, sums }, &[probs]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s: f64 = self.data(x).iter().sum();
        self.push(Tensor::scalar(s / n as f64), Op::Mean(x), &[x])
    }

    /// Column sums of a `[m×n]` tensor → `[n]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let n = self.value(x).cols();
        let mut out = vec![0.0; n];
        for row in self.data(x).chunks_exact(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        self.push(Tensor::vector(out), Op::SumRows(x), &[x])
    }

    /// Squared coefficient of variation `var(v) / (mean(v)² + 1e-10)`.
    pub fn cv_squared(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let n = d.len().max(1) as f64;
        let mean = d.iter().sum::<f64>() / n;
        let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let value = Tensor::scalar(var / (mean * mean + CV_EPS));
        self.push(value, Op::CvSquared(x), &[x])
    }

    // ----- backward ---------------------------------------------------------

    /// Computes `d loss / d leaf` for every differentiable leaf, discarding
    /// gradients from any previous call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.grads.clear();
        self.backward_accumulate(loss)
    }

    /// Like [`Graph::backward`] but adds into leaf gradients left over from
    /// earlier calls on this graph.
    pub fn backward_accumulate(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if !shape.iter().all(|&d| d == 1) {
            return Err(Error::NotScalar(shape.to_vec()));
        }
        let n = self.nodes.len();
        // Keep accumulated leaf grads, drop stale intermediate ones.
        let mut grads: Vec<Option<Vec<f64>>> = core::mem::take(&mut self.grads);
        grads.resize_with(n, || None);
        for (i, g) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[i].op, Op::Leaf) {
                *g = None;
            }
        }
        if !self.nodes[loss.0].needs_grad {
            self.grads = grads;
            return Ok(());
        }
        accumulate(&mut grads, loss, &[1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = self.dims2(*b).1;
                if self.wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_nt_acc(gy, self.data(*b), &mut ga, m, n, k);
                    accumulate_owned(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    matmul_tn_acc(self.data(*a), gy, &mut gb, m, k, n);
                    accumulate_owned(grads, *b, gb);
                }
            }
            Op::MatMulBt(a, b) => {
                // y[m×n] = a[m×k] bᵀ, b is [n×k]
                let (m, k) = self.dims2(*a);
                let n = self.dims2(*b).0;
                if self.wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_acc(gy, self.data(*b), &mut ga, m, n, k);
                    accumulate_owned(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; n * k];
                    matmul_tn_acc(gy, self.data(*a), &mut gb, m, n, k);
                    accumulate_owned(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, gy);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, gy);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let g = gy.iter().zip(self.data(*b)).map(|(g, y)| g * y).collect();
                    accumulate_owned(grads, *a, g);
                }
                if self.wants(*b) {
                    let g = gy.iter().zip(self.data(*a)).map(|(g, x)| g * x).collect();
                    accumulate_owned(grads, *b, g);
                }
            }
            Op::Scale(a, c) => {
                let g = gy.iter().map(|g| g * c).collect();
                accumulate_owned(grads, *a, g);
            }
            Op::AddBias(x, bias) => {
                if self.wants(*x) {
                    accumulate(grads, *x, gy);
                }
                if self.wants(*bias) {
                    let n = self.value(*bias).numel();
                    let mut gb = vec![0.0; n];
                    for row in gy.chunks_exact(n) {
                        for (o, g) in gb.iter_mut().zip(row) {
                            *o += g;
                        }
                    }
                    accumulate_owned(grads, *bias, gb);
                }
            }
            Op::Gelu(x) => {
                let g = gy
                    .iter()
                    .zip(self.data(*x))
                    .map(|(g, &v)| g * gelu_grad(v))
                    .collect();
                accumulate_owned(grads, *x, g);
            }
            Op::Softmax(x) => {
                let n = node.value.cols();
                let mut g = vec![0.0; gy.len()];
                for ((go, gr), yr) in g
                    .chunks_exact_mut(n)
                    .zip(gy.chunks_exact(n))
                    .zip(node.value.data().chunks_exact(n))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in go.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - dot);
                    }
                }
                accumulate_owned(grads, *x, g);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = node.value.cols();
                let gain_v = self.data(*gain);
                if self.wants(*gain) {
                    let mut gg = vec![0.0; n];
                    for (gr, hr) in gy.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for ((o, g), h) in gg.iter_mut().zip(gr).zip(hr) {
                            *o += g * h;
                        }
                    }
                    accumulate_owned(grads, *gain, gg);
                }
                if self.wants(*bias) {
                    let mut gb = vec![0.0; n];
                    for gr in gy.chunks_exact(n) {
                        for (o, g) in gb.iter_mut().zip(gr) {
                            *o += g;
                        }
                    }
                    accumulate_owned(grads, *bias, gb);
                }
                if self.wants(*x) {
                    let mut gx = vec![0.0; gy.len()];
                    let inv_n = 1.0 / n as f64;
                    for (r, ((go, gr), hr)) in gx
                        .chunks_exact_mut(n)
                        .zip(gy.chunks_exact(n))
                        .zip(xhat.chunks_exact(n))
                        .enumerate()
                    {
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..n {
                            let d = gr[j] * gain_v[j];
                            mean_d += d;
                            mean_dh += d * hr[j];
                        }
                        mean_d *= inv_n;
                        mean_dh *= inv_n;
                        for j in 0..n {
                            let d = gr[j] * gain_v[j];
                            go[j] = rstd[r] * (d - mean_d - hr[j] * mean_dh);
                        }
                    }
                    accumulate_owned(grads, *x, gx);
                }
            }
            Op::GatherRows { src, rows } => {
                let (m, n) = self.dims2(*src);
                let mut g = vec![0.0; m * n];
                for (i, &r) in rows.iter().enumerate() {
                    for (o, v) in g[r * n..(r + 1) * n].iter_mut().zip(&gy[i * n..(i + 1) * n]) {
                        *o += v;
                    }
                }
                accumulate_owned(grads, *src, g);
            }
            Op::ScatterRows { src, rows } => {
                let n = node.value.cols();
                let mut g = Vec::with_capacity(rows.len() * n);
                for &r in rows {
                    g.extend_from_slice(&gy[r * n..(r + 1) * n]);
                }
                accumulate_owned(grads, *src, g);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.wants(p) {
                        let mut g = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            g.extend_from_slice(&gy[r * total + offset..r * total + offset + w]);
                        }
                        accumulate_owned(grads, p, g);
                    }
                    offset += w;
                }
            }
            Op::MulRows(x, w) => {
                let n = node.value.cols();
                if self.wants(*x) {
                    let mut g = gy.to_vec();
                    for (row, s) in g.chunks_exact_mut(n).zip(self.data(*w)) {
                        for v in row {
                            *v *= s;
                        }
                    }
                    accumulate_owned(grads, *x, g);
                }
                if self.wants(*w) {
                    let g = gy
                        .chunks_exact(n)
                        .zip(self.data(*x).chunks_exact(n))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    accumulate_owned(grads, *w, g);
                }
            }
            Op::PickColumn { src, rows, col } => {
                let n = self.value(*src).cols();
                let mut g = vec![0.0; self.value(*src).numel()];
                for (i, &r) in rows.iter().enumerate() {
                    g[r * n + col] += gy[i];
                }
                accumulate_owned(grads, *src, g);
            }
            Op::Dropout { x, mask } => {
                let g = gy.iter().zip(mask).map(|(g, m)| g * m).collect();
                accumulate_owned(grads, *x, g);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.backprop_attention(*q, *k, *v, *heads, probs, gy, grads),
            Op::CrossEntropy {
                logits,
                targets,
                keep,
                probs,
                count,
            } => {
                let (b, v) = self.dims2(*logits);
                let scale = gy[0] / *count as f64;
                let mut g = vec![0.0; b * v];
                for i in 0..b {
                    if !keep[i] {
                        continue;
                    }
                    for j in 0..v {
                        g[i * v + j] = probs[i * v + j] * scale;
                    }
                    g[i * v + targets[i]] -= scale;
                }
                accumulate_owned(grads, *logits, g);
            }
            Op::TopKRenorm { probs, kept, sums } => {
                let n = node.value.cols();
                let out = node.value.data();
                let mut g = vec![0.0; gy.len()];
                for r in 0..sums.len() {
                    let row = r * n..(r + 1) * n;
                    let kept_r = &kept[row.clone()];
                    if kept_r.iter().all(|&k| k) {
                        g[row.clone()].copy_from_slice(&gy[row]);
                        continue;
                    }
                    let dot: f64 = (0..n)
                        .filter(|&j| kept_r[j])
                        .map(|j| gy[r * n + j] * out[r * n + j])
                        .sum();
                    for j in 0..n {
                        if kept_r[j] {
                            g[r * n + j] = (gy[r * n + j] - dot) / sums[r];
                        }
                    }
                }
                accumulate_owned(grads, *probs, g);
            }
            Op::Sum(x) => {
                let g = vec![gy[0]; self.value(*x).numel()];
                accumulate_owned(grads, *x, g);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel().max(1);
                let g = vec![gy[0] / n as f64; n];
                accumulate_owned(grads, *x, g);
            }
            Op::SumRows(x) => {
                let n = node.value.numel();
                let rows = self.value(*x).rows();
                let mut g = Vec::with_capacity(rows * n);
                for _ in 0..rows {
                    g.extend_from_slice(gy);
                }
                accumulate_owned(grads, *x, g);
            }
            Op::CvSquared(x) => {
                let d = self.data(*x);
                let n = d.len().max(1) as f64;
                let mean = d.iter().sum::<f64>() / n;
                let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let denom = mean * mean + CV_EPS;
                let g = d
                    .iter()
                    .map(|v| {
                        let dvar = 2.0 * (v - mean) / n;
                        let dden = 2.0 * mean / n;
                        gy[0] * (dvar / denom - var * dden / (denom * denom))
                    })
                    .collect();
                accumulate_owned(grads, *x, g);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        gy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (t, h) = self.dims2(q);
        let dk = h / heads;
        let scale = 1.0 / libm::sqrt(dk as f64);
        let mut gq = vec![0.0; t * h];
        let mut gk = vec![0.0; t * h];
        let mut gv = vec![0.0; t * h];
        for head in 0..heads {
            let qh = columns(self.data(q), t, h, head * dk, dk);
            let kh = columns(self.data(k), t, h, head * dk, dk);
            let vh = columns(self.data(v), t, h, head * dk, dk);
            let go = columns(gy, t, h, head * dk, dk);
            let p = &probs[head * t * t..(head + 1) * t * t];
            // dV = Pᵀ dO
            let mut gvh = vec![0.0; t * dk];
            matmul_tn_acc(p, &go, &mut gvh, t, t, dk);
            // dP = dO Vᵀ, then softmax backward into scaled scores
            let mut ds = vec![0.0; t * t];
            matmul_nt_acc(&go, &vh, &mut ds, t, dk, t);
            for (dr, pr) in ds.chunks_exact_mut(t).zip(p.chunks_exact(t)) {
                let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                for (d, pv) in dr.iter_mut().zip(pr) {
                    *d = pv * (*d - dot) * scale;
                }
            }
            let mut gqh = vec![0.0; t * dk];
            matmul_acc(&ds, &kh, &mut gqh, t, t, dk);
            let mut gkh = vec![0.0; t * dk];
            matmul_tn_acc(&ds, &qh, &mut gkh, t, t, dk);
            write_columns(&mut gq, &gqh, t, h, head * dk, dk);
            write_columns(&mut gk, &gkh, t, h, head * dk, dk);
            write_columns(&mut gv, &gvh, t, h, head * dk, dk);
        }
        if self.wants(q) {
            accumulate_owned(grads, q, gq);
        }
        if self.wants(k) {
            accumulate_owned(grads, k, gk);
        }
        if self.wants(v) {
            accumulate_owned(grads, v, gv);
        }
    }

    /// Adds the gradients of all parameter leaves into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for &(var, id) in &self.params {
            if let (Some(g), Some(dst)) = (self.grad(var), store.get_mut(id).grad_mut()) {
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn accumulate_owned(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(&g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn columns(src: &[f64], rows: usize, width: usize, start: usize, len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * len);
    for r in 0..rows {
        out.extend_from_slice(&src[r * width + start..r * width + start + len]);
    }
    out
}

fn write_columns(dst: &mut [f64], src: &[f64], rows: usize, width: usize, start: usize, len: usize) {
    for r in 0..rows {
        dst[r * width + start..r * width + start + len].copy_from_slice(&src[r * len..(r + 1) * len]);
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn masked_softmax_in_place(row: &mut [f64], key_mask: &[bool], scale: f64) {
    let mut max = f64::NEG_INFINITY;
    for (v, &m) in row.iter_mut().zip(key_mask) {
        *v *= scale;
        if m && *v > max {
            max = *v;
        }
    }
    if max == f64::NEG_INFINITY {
        row.fill(0.0);
        return;
    }
    let mut sum = 0.0;
    for (v, &m) in row.iter_mut().zip(key_mask) {
        *v = if m { libm::exp(*v - max) } else { 0.0 };
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Indices of the `k` largest values, ties to the lower index, in
/// descending-value order.
pub(crate) fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for (j, &v) in row.iter().enumerate() {
            if chosen.contains(&j) {
                continue;
            }
            if best.is_none_or(|b| v > row[b]) {
                best = Some(j);
            }
        }
        chosen.extend(best);
    }
    chosen
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
        + x * FRAC_1_SQRT_2PI * libm::exp(-0.5 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_pick() {
        let mut g = Graph::new();
        let i2 = g.constant(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let m = g.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
        let a = g.constant(t2(&[&[1.0, 0.0]]));
        let b = g.constant(t2(&[&[0.0], &[1.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 1]);
        assert_eq!(g.value(c).data(), &[0.0]);
    }

    #[test]
    fn matmul_rejects_bad_inner_dim() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(alloc::vec![0.0, 0.0]));
        let y = g.softmax(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
        let x = g.constant(Tensor::vector(alloc::vec![1000.0, 0.0]));
        let y = g.softmax(x);
        let d = g.value(y).data();
        assert!(d.iter().all(|v| v.is_finite()));
        assert!((d[0] - 1.0).abs() < 1e-15 && d[1] < 1e-300);
        let x = g.constant(Tensor::vector(alloc::vec![1.0, 2.0, 3.0]));
        let y = g.softmax(x);
        let want = [0.090_030_573_170_380_46, 0.244_728_471_054_797_64, 0.665_240_955_774_821_9];
        for (a, b) in g.value(y).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1, 4]));
        let l = g.cross_entropy(z, &[2], &[true]).unwrap();
        assert!((g.value(l).item() - libm::log(4.0)).abs() < 1e-12);

        let mut peaked = Tensor::zeros(&[1, 5]);
        peaked.data_mut()[3] = 100.0;
        let p = g.constant(peaked);
        let l = g.cross_entropy(p, &[3], &[true]).unwrap();
        assert!(g.value(l).item() < 1e-10);

        assert_eq!(g.cross_entropy(z, &[0], &[false]), Err(Error::EmptyLoss));
    }

    #[test]
    fn backward_square_sum_and_detached() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(alloc::vec![1.0, 2.0, 3.0]).with_grad());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(alloc::vec![1.0, 2.0, 3.0]).with_grad());
        let c = g.constant(Tensor::vector(alloc::vec![1.0, 1.0]));
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert!(g.grad(x).is_none_or(|gx| gx.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn backward_requires_scalar_and_accumulates_on_request() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(alloc::vec![1.0, 2.0]).with_grad());
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
        let s = g.sum(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
        g.backward_accumulate(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let one = g.constant(Tensor::full(&[2], 1.0));
        let zero = g.constant(Tensor::zeros(&[2]));
        let c = g.constant(Tensor::full(&[1, 2], 5.0));
        let y = g.layer_norm(c, one, zero, 1e-12).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let x = g.constant(t2(&[&[1.0, 3.0]]));
        let y = g.layer_norm(x, one, zero, 1e-12).unwrap();
        let d = g.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-6 && (d[1] - 1.0).abs() < 1e-6);

        let bias = g.constant(Tensor::vector(alloc::vec![0.25, -4.0]));
        let y = g.layer_norm(x, zero, bias, 1e-12).unwrap();
        assert_eq!(g.value(y).data(), &[0.25, -4.0]);
    }

    #[test]
    fn dropout_only_in_train_mode_and_seeded() {
        let x = Tensor::full(&[4, 8], 1.0);
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        assert_eq!(g.dropout(v, 0.5), v);

        let run = |seed| {
            let mut g = Graph::new().with_dropout_seed(seed);
            let v = g.constant(x.clone());
            let d = g.dropout(v, 0.5);
            g.value(d).data().to_vec()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
        assert!(run(3).iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn attention_single_token_returns_value() {
        let mut g = Graph::new();
        let q = g.constant(t2(&[&[0.3, -1.0]]));
        let k = g.constant(t2(&[&[2.0, 0.5]]));
        let v = g.constant(t2(&[&[7.0, -3.0]]));
        let o = g.attention(q, k, v, 1, &[true]).unwrap();
        assert_eq!(g.value(o).data(), &[7.0, -3.0]);
    }

    #[test]
    fn attention_fully_masked_row_is_zero() {
        let mut g = Graph::new();
        let q = g.constant(t2(&[&[0.3, -1.0], &[1.0, 1.0]]));
        let v = g.constant(t2(&[&[7.0, -3.0], &[1.0, 2.0]]));
        let o = g.attention(q, q, v, 2, &[false, false]).unwrap();
        assert!(g.value(o).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn top_k_ties_go_to_lower_index() {
        assert_eq!(top_k_indices(&[0.25, 0.25, 0.25, 0.25], 2), alloc::vec![0, 1]);
        assert_eq!(top_k_indices(&[0.1, 0.4, 0.1, 0.4], 2), alloc::vec![1, 3]);
    }
}
