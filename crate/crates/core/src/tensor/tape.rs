use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::kernels::{gemm, logsumexp_rows, softmax_rows, Operand};
use super::{Element, Shape, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Per op-kind saved state. Inputs are referenced by node index; values of
/// inputs and outputs stay on the tape, so only derived quantities that are
/// expensive to recompute are stored here.
enum Op<F> {
    Leaf,
    /// `[batch,m,k]·[batch|1,k,n]`, rhs optionally stored transposed.
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_transposed: bool,
        b_shared: bool,
    },
    Linear {
        x: usize,
        w: usize,
        bias: Option<usize>,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        s: F,
    },
    /// Additive mask; gradient passes through unchanged.
    AddMask {
        a: usize,
    },
    Softmax {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LogSoftmax {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    /// Saves the normalized input and per-row reciprocal std.
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Gelu {
        a: usize,
    },
    /// Saves the per-element multiplier (0 or 1/(1-p)).
    Dropout {
        a: usize,
        mask: Vec<F>,
    },
    Concat {
        parts: Vec<usize>,
    },
    SplitHeads {
        a: usize,
        batch: usize,
        len: usize,
        heads: usize,
        head_dim: usize,
    },
    MergeHeads {
        a: usize,
        batch: usize,
        len: usize,
        heads: usize,
        head_dim: usize,
    },
    Embedding {
        table: usize,
        ids: Vec<u32>,
    },
    /// Saves the row softmax of the logits.
    CrossEntropy {
        logits: usize,
        targets: Vec<u32>,
        weights: Vec<F>,
        probs: Vec<F>,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    Reshape {
        a: usize,
    },
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Linear { .. } => "linear",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddMask { .. } => "add_mask",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::Dropout { .. } => "dropout",
            Op::Concat { .. } => "concat",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::Embedding { .. } => "embedding",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Reshape { .. } => "reshape",
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Append-only record of operations for reverse-mode differentiation.
///
/// A tape built with [`Tape::no_grad`] computes values only and keeps no
/// saved activations. After [`Tape::backward`] the tape is frozen: further
/// ops and a second backward are errors until [`Tape::reset`].
pub struct Tape<F> {
    id: u64,
    nodes: Vec<Node<F>>,
    grad_enabled: bool,
    frozen: bool,
    nan_guard: bool,
}

impl<F: Element> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<F> {
    tape: u64,
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Element> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }
}

fn axis_split(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

fn gelu_scalar<F: Element>(x: F) -> F {
    let half = F::of(0.5);
    half * x * (F::one() + (x * F::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<F: Element>(x: F) -> F {
    let half = F::of(0.5);
    let cdf = half * (F::one() + (x * F::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * F::of(0.398_942_280_401_432_7);
    cdf + x * pdf
}

fn add_into<F: Element>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<F: Element> Tape<F> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grad_enabled: true,
            frozen: false,
            nan_guard: false,
        }
    }

    /// A tape that records values only; nothing on it requires a gradient.
    pub fn no_grad() -> Self {
        let mut t = Self::new();
        t.grad_enabled = false;
        t
    }

    /// Check every op output for NaN/Inf and fail with the op name.
    pub fn with_nan_guard(mut self, on: bool) -> Self {
        self.nan_guard = on;
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Drop all nodes. Vars from before the reset become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.frozen = false;
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        assert_eq!(v.tape, self.id, "var from a different tape");
        &self.nodes[v.index].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Tape("variable does not belong to this tape".into()));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[usize]) -> Result<Var> {
        if self.frozen {
            return Err(Error::Tape("tape is frozen after backward; reset it first".into()));
        }
        if self.nan_guard && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    /// Matrix product of `[m,k]·[k,n]`, or batched `[b,m,k]·[b,k,n]`.
    /// A 2-D right operand is shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a·bᵀ` where `b` is `[n,k]` or `[batch,n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_transposed: bool) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (ad, bd) = (self.nodes[ai].value.dims(), self.nodes[bi].value.dims());
        let op = if b_transposed { "matmul_nt" } else { "matmul" };
        if ad.len() < 2 || bd.len() < 2 || bd.len() > ad.len() {
            return Err(Error::shape(op, ad, bd));
        }
        let (m, k) = (ad[ad.len() - 2], ad[ad.len() - 1]);
        let (bk, n) = if b_transposed {
            (bd[bd.len() - 1], bd[bd.len() - 2])
        } else {
            (bd[bd.len() - 2], bd[bd.len() - 1])
        };
        let lead_a = &ad[..ad.len() - 2];
        let lead_b = &bd[..bd.len() - 2];
        let b_shared = lead_b.is_empty();
        if bk != k || (!b_shared && lead_a != lead_b) {
            return Err(Error::shape(op, ad, bd));
        }
        let batch: usize = lead_a.iter().product();
        let mut out_dims = lead_a.to_vec();
        out_dims.extend([m, n]);
        let mut out = vec![F::zero(); batch * m * n];
        {
            let av = self.nodes[ai].value.data();
            let bv = self.nodes[bi].value.data();
            let mut bop = if b_transposed { Operand::t(bv) } else { Operand::plain(bv) };
            bop.broadcast = b_shared;
            gemm(batch, m, k, n, Operand::plain(av), bop, &mut out, false);
        }
        let value = Tensor::from_parts(Shape(out_dims), out);
        self.push(
            value,
            Op::MatMul {
                a: ai,
                b: bi,
                batch,
                m,
                k,
                n,
                b_transposed,
                b_shared,
            },
            &[ai, bi],
        )
    }

    /// `x·W + b` over the last axis of `x`; `W` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (xi, wi) = (self.check(x)?, self.check(w)?);
        let bi = bias.map(|b| self.check(b)).transpose()?;
        let xd = self.nodes[xi].value.dims().to_vec();
        let wd = self.nodes[wi].value.dims();
        if wd.len() != 2 || xd.is_empty() || xd[xd.len() - 1] != wd[0] {
            return Err(Error::shape("linear", &xd, wd));
        }
        let (k, n) = (wd[0], wd[1]);
        if let Some(bi) = bi {
            let bd = self.nodes[bi].value.dims();
            if bd != [n] {
                return Err(Error::shape("linear bias", wd, bd));
            }
        }
        let rows = self.nodes[xi].value.numel() / k;
        let mut out = vec![F::zero(); rows * n];
        if let Some(bi) = bi {
            let bv = self.nodes[bi].value.data();
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            1,
            rows,
            k,
            n,
            Operand::plain(self.nodes[xi].value.data()),
            Operand::plain(self.nodes[wi].value.data()),
            &mut out,
            bi.is_some(),
        );
        let mut dims = xd;
        *dims.last_mut().unwrap() = n;
        let mut inputs = vec![xi, wi];
        inputs.extend(bi);
        self.push(
            Tensor::from_parts(Shape(dims), out),
            Op::Linear { x: xi, w: wi, bias: bi },
            &inputs,
        )
    }

    /// Elementwise sum. `b` may also have a shape equal to a suffix of `a`'s
    /// shape, in which case it is broadcast over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (ad, bd) = (self.nodes[ai].value.dims(), self.nodes[bi].value.dims());
        if bd.len() > ad.len() || ad[ad.len() - bd.len()..] != *bd {
            return Err(Error::shape("add", ad, bd));
        }
        let bv = self.nodes[bi].value.data();
        let w = bv.len();
        let out: Vec<F> = self.nodes[ai]
            .value
            .data()
            .chunks_exact(w)
            .flat_map(|chunk| chunk.iter().zip(bv).map(|(&x, &y)| x + y))
            .collect();
        let shape = self.nodes[ai].value.shape().clone();
        self.push(Tensor::from_parts(shape, out), Op::Add { a: ai, b: bi }, &[ai, bi])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.dims() != bv.dims() {
            return Err(Error::shape("mul", av.dims(), bv.dims()));
        }
        let out = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let shape = av.shape().clone();
        self.push(Tensor::from_parts(shape, out), Op::Mul { a: ai, b: bi }, &[ai, bi])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ai = self.check(a)?;
        let s = F::of(s);
        let av = &self.nodes[ai].value;
        let out = av.data().iter().map(|&x| x * s).collect();
        let shape = av.shape().clone();
        self.push(Tensor::from_parts(shape, out), Op::Scale { a: ai, s }, &[ai])
    }

    /// Adds `fill` where `mask` is true. `mask` is `[q,k]` and is broadcast
    /// over the leading axes of `a` (`[..., q, k]`).
    pub fn add_mask(&mut self, a: Var, mask: &[bool], fill: f64) -> Result<Var> {
        let ai = self.check(a)?;
        let av = &self.nodes[ai].value;
        let d = av.dims();
        if d.len() < 2 || d[d.len() - 1] * d[d.len() - 2] != mask.len() {
            return Err(Error::shape("add_mask", d, &[mask.len()]));
        }
        let fill = F::of(fill);
        let out = av
            .data()
            .chunks_exact(mask.len())
            .flat_map(|block| {
                block
                    .iter()
                    .zip(mask)
                    .map(|(&x, &m)| if m { x + fill } else { x })
            })
            .collect();
        let shape = av.shape().clone();
        self.push(Tensor::from_parts(shape, out), Op::AddMask { a: ai }, &[ai])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ai = self.check(a)?;
        let av = &self.nodes[ai].value;
        if axis >= av.shape().rank() {
            return Err(Error::invalid("softmax", format!("axis {axis} out of range for {:?}", av.dims())));
        }
        let (outer, len, inner) = axis_split(av.dims(), axis);
        let mut out = vec![F::zero(); av.numel()];
        if inner == 1 {
            softmax_rows(av.data(), len, &mut out);
        } else {
            let x = av.data();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let max = (0..len).map(|j| x[at(j)]).fold(F::neg_infinity(), F::max);
                    let mut total = F::zero();
                    for j in 0..len {
                        out[at(j)] = (x[at(j)] - max).exp();
                        total += out[at(j)];
                    }
                    for j in 0..len {
                        out[at(j)] = out[at(j)] / total;
                    }
                }
            }
        }
        let shape = av.shape().clone();
        self.push(
            Tensor::from_parts(shape, out),
            Op::Softmax {
                a: ai,
                outer,
                len,
                inner,
            },
            &[ai],
        )
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ai = self.check(a)?;
        let av = &self.nodes[ai].value;
        if axis >= av.shape().rank() {
            return Err(Error::invalid("log_softmax", format!("axis {axis} out of range for {:?}", av.dims())));
        }
        let (outer, len, inner) = axis_split(av.dims(), axis);
        let x = av.data();
        let mut out = vec![F::zero(); av.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(F::neg_infinity(), F::max);
                let s: F = (0..len).map(|j| (x[at(j)] - max).exp()).sum();
                let lse = max + s.ln();
                for j in 0..len {
                    out[at(j)] = x[at(j)] - lse;
                }
            }
        }
        let shape = av.shape().clone();
        self.push(
            Tensor::from_parts(shape, out),
            Op::LogSoftmax {
                a: ai,
                outer,
                len,
                inner,
            },
            &[ai],
        )
    }

    /// Layer normalization over the last axis with affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xi, gi, bi) = (self.check(x)?, self.check(gain)?, self.check(bias)?);
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm", "eps must be positive"));
        }
        let xv = &self.nodes[xi].value;
        let w = xv.shape().last();
        for idx in [gi, bi] {
            if self.nodes[idx].value.dims() != [w] {
                return Err(Error::shape("layer_norm", xv.dims(), self.nodes[idx].value.dims()));
            }
        }
        let g = self.nodes[gi].value.data();
        let b = self.nodes[bi].value.data();
        let rows = xv.shape().rows();
        let inv_w = F::one() / F::of(w as f64);
        let eps = F::of(eps);
        let mut xhat = vec![F::zero(); xv.numel()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xv.numel()];
        for r in 0..rows {
            let src = &xv.data()[r * w..(r + 1) * w];
            let mean = src.iter().copied().sum::<F>() * inv_w;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_w;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..w {
                let h = (src[j] - mean) * rs;
                xhat[r * w + j] = h;
                out[r * w + j] = h * g[j] + b[j];
            }
        }
        let shape = xv.shape().clone();
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x: xi,
                gain: gi,
                bias: bi,
                xhat,
                rstd,
            },
            &[xi, gi, bi],
        )
    }

    /// Exact GELU, `0.5·x·(1 + erf(x/√2))`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let av = &self.nodes[ai].value;
        let out = av.data().iter().map(|&x| gelu_scalar(x)).collect();
        let shape = av.shape().clone();
        self.push(Tensor::from_parts(shape, out), Op::Gelu { a: ai }, &[ai])
    }

    /// Inverted dropout. Identity when `p == 0` or not training.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        let ai = self.check(a)?;
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("dropout", format!("probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let keep = F::of(1.0 / (1.0 - p));
        let av = &self.nodes[ai].value;
        let mask: Vec<F> = (0..av.numel())
            .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
            .collect();
        let out = av.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let shape = av.shape().clone();
        let mask = if self.grad_enabled { mask } else { Vec::new() };
        self.push(Tensor::from_parts(shape, out), Op::Dropout { a: ai, mask }, &[ai])
    }

    /// Concatenate along the last axis; leading dims must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat", "no inputs"));
        }
        let idx: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect::<Result<_>>()?;
        let first = self.nodes[idx[0]].value.dims();
        let lead = &first[..first.len() - 1];
        for &i in &idx[1..] {
            let d = self.nodes[i].value.dims();
            if d.len() != first.len() || &d[..d.len() - 1] != lead {
                return Err(Error::shape("concat", first, d));
            }
        }
        let rows = self.nodes[idx[0]].value.shape().rows();
        let total: usize = idx.iter().map(|&i| self.nodes[i].value.shape().last()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &i in &idx {
                out.extend_from_slice(self.nodes[i].value.row(r));
            }
        }
        let mut dims = lead.to_vec();
        dims.push(total);
        self.push(Tensor::from_parts(Shape(dims), out), Op::Concat { parts: idx.clone() }, &idx)
    }

    /// `[B, T, H·dk] → [B·H, T, dk]`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let ai = self.check(a)?;
        let d = self.nodes[ai].value.dims();
        if d.len() != 3 || heads == 0 || !d[2].is_multiple_of(heads) {
            return Err(Error::shape("split_heads", d, &[heads]));
        }
        let (batch, len, width) = (d[0], d[1], d[2]);
        let head_dim = width / heads;
        let src = self.nodes[ai].value.data();
        let mut out = vec![F::zero(); src.len()];
        for b in 0..batch {
            for t in 0..len {
                for h in 0..heads {
                    let s = (b * len + t) * width + h * head_dim;
                    let o = ((b * heads + h) * len + t) * head_dim;
                    out[o..o + head_dim].copy_from_slice(&src[s..s + head_dim]);
                }
            }
        }
        self.push(
            Tensor::from_parts(Shape(vec![batch * heads, len, head_dim]), out),
            Op::SplitHeads {
                a: ai,
                batch,
                len,
                heads,
                head_dim,
            },
            &[ai],
        )
    }

    /// `[B·H, T, dk] → [B, T, H·dk]`, inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let ai = self.check(a)?;
        let d = self.nodes[ai].value.dims();
        if d.len() != 3 || heads == 0 || !d[0].is_multiple_of(heads) {
            return Err(Error::shape("merge_heads", d, &[heads]));
        }
        let (batch, len, head_dim) = (d[0] / heads, d[1], d[2]);
        let width = heads * head_dim;
        let src = self.nodes[ai].value.data();
        let mut out = vec![F::zero(); src.len()];
        for b in 0..batch {
            for t in 0..len {
                for h in 0..heads {
                    let o = (b * len + t) * width + h * head_dim;
                    let s = ((b * heads + h) * len + t) * head_dim;
                    out[o..o + head_dim].copy_from_slice(&src[s..s + head_dim]);
                }
            }
        }
        self.push(
            Tensor::from_parts(Shape(vec![batch, len, width]), out),
            Op::MergeHeads {
                a: ai,
                batch,
                len,
                heads,
                head_dim,
            },
            &[ai],
        )
    }

    /// Gather rows of `table` (`[V, d]`); output has shape `dims ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32], dims: &[usize]) -> Result<Var> {
        let ti = self.check(table)?;
        let tv = &self.nodes[ti].value;
        let td = tv.dims();
        if td.len() != 2 {
            return Err(Error::shape("embedding", td, dims));
        }
        if dims.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("embedding", dims, &[ids.len()]));
        }
        let (vocab, width) = (td[0], td[1]);
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::invalid("embedding", format!("token id {id} out of range for vocabulary of {vocab}")));
            }
            out.extend_from_slice(tv.row(id as usize));
        }
        let mut out_dims = dims.to_vec();
        out_dims.push(width);
        let shape = Shape::new(out_dims)?;
        self.push(
            Tensor::from_parts(shape, out),
            Op::Embedding {
                table: ti,
                ids: ids.to_vec(),
            },
            &[ti],
        )
    }

    /// `Σ_r weights[r] · (−log softmax(logits[r])[targets[r]])` over the rows
    /// of `logits` viewed as `[rows, vocab]`. Returns a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], weights: &[f64]) -> Result<Var> {
        let li = self.check(logits)?;
        let lv = &self.nodes[li].value;
        let vocab = lv.shape().last();
        let rows = lv.shape().rows();
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::shape("cross_entropy", lv.dims(), &[targets.len(), weights.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::invalid("cross_entropy", format!("target {t} out of range for {vocab} classes")));
        }
        let lse = logsumexp_rows(lv.data(), vocab);
        let weights: Vec<F> = weights.iter().map(|&w| F::of(w)).collect();
        let mut loss = F::zero();
        for r in 0..rows {
            if weights[r] != F::zero() {
                loss += weights[r] * (lse[r] - lv.data()[r * vocab + targets[r] as usize]);
            }
        }
        let probs = if self.grad_enabled {
            let mut p = vec![F::zero(); lv.numel()];
            softmax_rows(lv.data(), vocab, &mut p);
            p
        } else {
            Vec::new()
        };
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: li,
                targets: targets.to_vec(),
                weights,
                probs,
            },
            &[li],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let s = self.nodes[ai].value.data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { a: ai }, &[ai])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let v = &self.nodes[ai].value;
        let s: F = v.data().iter().copied().sum();
        let m = s / F::of(v.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean { a: ai }, &[ai])
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let ai = self.check(a)?;
        let t = self.nodes[ai].value.reshape(dims.to_vec())?;
        self.push(t, Op::Reshape { a: ai }, &[ai])
    }

    /// Reverse pass from the scalar `loss`, returning gradients for every
    /// node that requires one. Freezes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<F>> {
        if self.nodes.is_empty() {
            return Err(Error::Tape("backward on an empty tape".into()));
        }
        if self.frozen {
            return Err(Error::Tape("backward already ran on this tape; reset it first".into()));
        }
        let li = self.check(loss)?;
        if self.nodes[li].value.numel() != 1 || self.nodes[li].value.shape().rank() > 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.nodes[li].value.dims()),
            ));
        }
        self.frozen = true;
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[li].requires_grad {
            grads[li] = Some(vec![F::one()]);
        }
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().clone(), g)))
            .collect();
        Ok(Gradients { tape: self.id, grads })
    }

    fn backprop_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].requires_grad;
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [F])| {
            let slot = grads[j].get_or_insert_with(|| vec![F::zero(); nodes[j].value.numel()]);
            f(slot);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_transposed,
                b_shared,
            } => {
                if wants(a) {
                    let bv = nodes[b].value.data();
                    // dA = dC·Bᵀ
                    let mut bop = if b_transposed { Operand::plain(bv) } else { Operand::t(bv) };
                    bop.broadcast = b_shared;
                    acc(a, &mut |da| gemm(batch, m, n, k, Operand::plain(g), bop, da, true));
                }
                if wants(b) {
                    let av = nodes[a].value.data();
                    if b_shared {
                        // Stack the batch into rows: one GEMM over batch·m rows.
                        acc(b, &mut |db| {
                            if b_transposed {
                                gemm(1, n, batch * m, k, Operand::t(g), Operand::plain(av), db, true)
                            } else {
                                gemm(1, k, batch * m, n, Operand::t(av), Operand::plain(g), db, true)
                            }
                        });
                    } else {
                        acc(b, &mut |db| {
                            if b_transposed {
                                gemm(batch, n, m, k, Operand::t(g), Operand::plain(av), db, true)
                            } else {
                                gemm(batch, k, m, n, Operand::t(av), Operand::plain(g), db, true)
                            }
                        });
                    }
                }
            }
            &Op::Linear { x, w, bias } => {
                let wd = nodes[w].value.dims();
                let (k, n) = (wd[0], wd[1]);
                let rows = g.len() / n;
                if wants(x) {
                    let wv = nodes[w].value.data();
                    acc(x, &mut |dx| gemm(1, rows, n, k, Operand::plain(g), Operand::t(wv), dx, true));
                }
                if wants(w) {
                    let xv = nodes[x].value.data();
                    acc(w, &mut |dw| gemm(1, k, rows, n, Operand::t(xv), Operand::plain(g), dw, true));
                }
                if let Some(bi) = bias {
                    if wants(bi) {
                        acc(bi, &mut |db| {
                            for row in g.chunks_exact(n) {
                                add_into(db, row);
                            }
                        });
                    }
                }
            }
            &Op::Add { a, b } => {
                if wants(a) {
                    acc(a, &mut |da| add_into(da, g));
                }
                if wants(b) {
                    acc(b, &mut |db| {
                        let w = db.len();
                        for chunk in g.chunks_exact(w) {
                            add_into(db, chunk);
                        }
                    });
                }
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (nodes[a].value.data(), nodes[b].value.data());
                if wants(a) {
                    acc(a, &mut |da| {
                        for ((d, &gg), &y) in da.iter_mut().zip(g).zip(bv) {
                            *d += gg * y;
                        }
                    });
                }
                if wants(b) {
                    acc(b, &mut |db| {
                        for ((d, &gg), &x) in db.iter_mut().zip(g).zip(av) {
                            *d += gg * x;
                        }
                    });
                }
            }
            &Op::Scale { a, s } => {
                if wants(a) {
                    acc(a, &mut |da| {
                        for (d, &gg) in da.iter_mut().zip(g) {
                            *d += gg * s;
                        }
                    });
                }
            }
            &Op::AddMask { a } | &Op::Reshape { a } => {
                if wants(a) {
                    acc(a, &mut |da| add_into(da, g));
                }
            }
            &Op::Softmax { a, outer, len, inner } => {
                if wants(a) {
                    let y = nodes[i].value.data();
                    acc(a, &mut |da| {
                        for o in 0..outer {
                            for c in 0..inner {
                                let at = |j: usize| o * len * inner + j * inner + c;
                                let dot: F = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                                for j in 0..len {
                                    da[at(j)] += y[at(j)] * (g[at(j)] - dot);
                                }
                            }
                        }
                    });
                }
            }
            &Op::LogSoftmax { a, outer, len, inner } => {
                if wants(a) {
                    let y = nodes[i].value.data();
                    acc(a, &mut |da| {
                        for o in 0..outer {
                            for c in 0..inner {
                                let at = |j: usize| o * len * inner + j * inner + c;
                                let total: F = (0..len).map(|j| g[at(j)]).sum();
                                for j in 0..len {
                                    da[at(j)] += g[at(j)] - y[at(j)].exp() * total;
                                }
                            }
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let gv = nodes[gain].value.data();
                let w = gv.len();
                if wants(x) {
                    let inv_w = F::one() / F::of(w as f64);
                    acc(x, &mut |dx| {
                        for (r, &rs) in rstd.iter().enumerate() {
                            let gr = &g[r * w..(r + 1) * w];
                            let hr = &xhat[r * w..(r + 1) * w];
                            let mut mean_dh = F::zero();
                            let mut mean_dh_h = F::zero();
                            for j in 0..w {
                                let dh = gr[j] * gv[j];
                                mean_dh += dh;
                                mean_dh_h += dh * hr[j];
                            }
                            mean_dh = mean_dh * inv_w;
                            mean_dh_h = mean_dh_h * inv_w;
                            for j in 0..w {
                                let dh = gr[j] * gv[j];
                                dx[r * w + j] += rs * (dh - mean_dh - hr[j] * mean_dh_h);
                            }
                        }
                    });
                }
                if wants(gain) {
                    acc(gain, &mut |dg| {
                        for (gr, hr) in g.chunks_exact(w).zip(xhat.chunks_exact(w)) {
                            for j in 0..w {
                                dg[j] += gr[j] * hr[j];
                            }
                        }
                    });
                }
                if wants(bias) {
                    acc(bias, &mut |db| {
                        for gr in g.chunks_exact(w) {
                            add_into(db, gr);
                        }
                    });
                }
            }
            &Op::Gelu { a } => {
                if wants(a) {
                    let xv = nodes[a].value.data();
                    acc(a, &mut |da| {
                        for ((d, &gg), &x) in da.iter_mut().zip(g).zip(xv) {
                            *d += gg * gelu_grad(x);
                        }
                    });
                }
            }
            Op::Dropout { a, mask } => {
                if wants(*a) {
                    acc(*a, &mut |da| {
                        for ((d, &gg), &m) in da.iter_mut().zip(g).zip(mask) {
                            *d += gg * m;
                        }
                    });
                }
            }
            Op::Concat { parts } => {
                let total = nodes[i].value.shape().last();
                let rows = g.len() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p].value.shape().last();
                    if wants(p) {
                        acc(p, &mut |dp| {
                            for r in 0..rows {
                                add_into(&mut dp[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                            }
                        });
                    }
                    offset += w;
                }
            }
            &Op::SplitHeads {
                a,
                batch,
                len,
                heads,
                head_dim,
            } => {
                if wants(a) {
                    let width = heads * head_dim;
                    acc(a, &mut |da| {
                        for b in 0..batch {
                            for t in 0..len {
                                for h in 0..heads {
                                    let s = (b * len + t) * width + h * head_dim;
                                    let o = ((b * heads + h) * len + t) * head_dim;
                                    add_into(&mut da[s..s + head_dim], &g[o..o + head_dim]);
                                }
                            }
                        }
                    });
                }
            }
            &Op::MergeHeads {
                a,
                batch,
                len,
                heads,
                head_dim,
            } => {
                if wants(a) {
                    let width = heads * head_dim;
                    acc(a, &mut |da| {
                        for b in 0..batch {
                            for t in 0..len {
                                for h in 0..heads {
                                    let o = (b * len + t) * width + h * head_dim;
                                    let s = ((b * heads + h) * len + t) * head_dim;
                                    add_into(&mut da[s..s + head_dim], &g[o..o + head_dim]);
                                }
                            }
                        }
                    });
                }
            }
            Op::Embedding { table, ids } => {
                if wants(*table) {
                    let w = nodes[*table].value.shape().last();
                    acc(*table, &mut |dt| {
                        for (r, &id) in ids.iter().enumerate() {
                            let id = id as usize;
                            add_into(&mut dt[id * w..(id + 1) * w], &g[r * w..(r + 1) * w]);
                        }
                    });
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                if wants(*logits) {
                    let vocab = nodes[*logits].value.shape().last();
                    let g0 = g[0];
                    acc(*logits, &mut |dl| {
                        for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                            if w == F::zero() {
                                continue;
                            }
                            let s = g0 * w;
                            let row = &mut dl[r * vocab..(r + 1) * vocab];
                            for (d, &p) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                                *d += s * p;
                            }
                            row[t as usize] -= s;
                        }
                    });
                }
            }
            &Op::Sum { a } => {
                if wants(a) {
                    let g0 = g[0];
                    acc(a, &mut |da| da.iter_mut().for_each(|d| *d += g0));
                }
            }
            &Op::Mean { a } => {
                if wants(a) {
                    let n = F::of(nodes[a].value.numel() as f64);
                    let g0 = g[0] / n;
                    acc(a, &mut |da| da.iter_mut().for_each(|d| *d += g0));
                }
            }
        }
    }
}
