//! Attention, feed-forward and post-norm sublayer blocks.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Tape, Var};

/// Additive value for masked attention logits.
pub const MASK_FILL: f64 = -1e9;

/// Forward mode. Dropout is active only in `Train`.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    pub(crate) fn dropout<F: Element>(&mut self, tape: &mut Tape<F>, x: Var, p: f64) -> Result<Var> {
        match self {
            Mode::Eval => Ok(x),
            Mode::Train(rng) => tape.dropout(x, p, true, &mut **rng),
        }
    }
}

/// `[q, k]` mask that blocks keys after the query position.
pub fn causal_mask(len: usize) -> Vec<bool> {
    (0..len * len).map(|i| i % len > i / len).collect()
}

/// `Softmax(QKᵀ/√d_k + mask)·V` over `[B, Tq, dk]`, `[B, Tk, dk]`, `[B, Tk, dv]`.
/// Returns `(output, weights)`; `weights` is `[B, Tq, Tk]` before dropout.
pub fn scaled_dot_product_attention<F: Element>(
    tape: &mut Tape<F>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&[bool]>,
    dropout_p: f64,
    mode: &mut Mode<'_>,
) -> Result<(Var, Var)> {
    let (qd, kd) = (tape.value(q).dims().to_vec(), tape.value(k).dims().to_vec());
    let vd = tape.value(v).dims().to_vec();
    if qd.len() != 3 || kd.len() != 3 || vd.len() != 3 || qd[2] != kd[2] || qd[0] != kd[0] || kd[..2] != vd[..2] {
        return Err(Error::shape("attention", &qd, &kd));
    }
    let (tq, tk) = (qd[1], kd[1]);
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, 1.0 / (qd[2] as f64).sqrt())?;
    let scores = match mask {
        Some(m) => {
            if m.len() != tq * tk {
                return Err(Error::shape("attention mask", &[tq, tk], &[m.len()]));
            }
            if let Some(row) = m.chunks(tk).position(|r| r.iter().all(|&b| b)) {
                return Err(Error::invalid("attention", format!("query {row} has every key masked")));
            }
            tape.add_mask(scores, m, MASK_FILL)?
        }
        None => scores,
    };
    let weights = tape.softmax(scores, 2)?;
    let dropped = mode.dropout(tape, weights, dropout_p)?;
    let out = tape.matmul(dropped, v)?;
    Ok((out, weights))
}

/// Tape handles for one attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttnVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// `Concat(h₁..h_H)·W_O` with `h_i` = attention over the `i`-th projected subspace.
/// Inputs are `[B, Tq, d]` and `[B, Tk, d]`; returns the output and the
/// per-head weights `[B·H, Tq, Tk]`.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<F: Element>(
    tape: &mut Tape<F>,
    x_q: Var,
    x_kv: Var,
    p: &AttnVars,
    heads: usize,
    mask: Option<&[bool]>,
    dropout_p: f64,
    mode: &mut Mode<'_>,
) -> Result<(Var, Var)> {
    let d = tape.value(x_q).shape().last();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("width {d} is not divisible by {heads} heads")));
    }
    let q = tape.linear(x_q, p.wq, Some(p.bq))?;
    let k = tape.linear(x_kv, p.wk, Some(p.bk))?;
    let v = tape.linear(x_kv, p.wv, Some(p.bv))?;
    let (q, k, v) = (
        tape.split_heads(q, heads)?,
        tape.split_heads(k, heads)?,
        tape.split_heads(v, heads)?,
    );
    let (ctx, weights) = scaled_dot_product_attention(tape, q, k, v, mask, dropout_p, mode)?;
    let merged = tape.merge_heads(ctx, heads)?;
    let out = tape.linear(merged, p.wo, Some(p.bo))?;
    Ok((out, weights))
}

#[derive(Clone, Copy, Debug)]
pub struct FfnVars {
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

/// `FC₂(Dropout(GELU(FC₁(x))))`.
pub fn ffn<F: Element>(tape: &mut Tape<F>, x: Var, p: &FfnVars, dropout_p: f64, mode: &mut Mode<'_>) -> Result<Var> {
    let h = tape.linear(x, p.fc1_w, Some(p.fc1_b))?;
    let h = tape.gelu(h)?;
    let h = mode.dropout(tape, h, dropout_p)?;
    tape.linear(h, p.fc2_w, Some(p.fc2_b))
}

#[derive(Clone, Copy, Debug)]
pub struct NormVars {
    pub gain: Var,
    pub bias: Var,
}

/// Post-norm sublayer connection, `LayerNorm(x + f(x))`.
pub fn sublayer<F: Element>(
    tape: &mut Tape<F>,
    x_in: Var,
    norm: &NormVars,
    eps: f64,
    f: impl FnOnce(&mut Tape<F>, Var) -> Result<Var>,
) -> Result<Var> {
    let branch = f(tape, x_in)?;
    let (a, b) = (tape.value(x_in).dims(), tape.value(branch).dims());
    if a != b {
        return Err(Error::shape("sublayer", a, b));
    }
    let sum = tape.add(x_in, branch)?;
    tape.layer_norm(sum, norm.gain, norm.bias, eps)
}
