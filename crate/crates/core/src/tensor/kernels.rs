use super::Element;

/// Operand layout for [`gemm`]: a contiguous `[rows, cols]` block per batch,
/// optionally read transposed, optionally shared across the batch.
#[derive(Clone, Copy)]
pub(crate) struct Operand<'a, F> {
    pub data: &'a [F],
    pub transposed: bool,
    pub broadcast: bool,
}

impl<'a, F> Operand<'a, F> {
    pub fn plain(data: &'a [F]) -> Self {
        Operand {
            data,
            transposed: false,
            broadcast: false,
        }
    }

    pub fn t(data: &'a [F]) -> Self {
        Operand {
            data,
            transposed: true,
            broadcast: false,
        }
    }

    #[cfg(test)]
    pub fn shared(mut self) -> Self {
        self.broadcast = true;
        self
    }
}

/// Batched `c[i] (+)= a[i]·b[i]` where the logical operands are `m×k` and `k×n`.
pub(crate) fn gemm<F: Element>(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: Operand<'_, F>,
    b: Operand<'_, F>,
    c: &mut [F],
    accumulate: bool,
) {
    let a_stride = if a.broadcast { 0 } else { m * k };
    let b_stride = if b.broadcast { 0 } else { k * n };
    assert!(a.data.len() >= a_stride * (batch - 1) + m * k);
    assert!(b.data.len() >= b_stride * (batch - 1) + k * n);
    assert_eq!(c.len(), batch * m * n);
    // stored [m,k] row-major, or [k,m] read transposed
    let (rsa, csa) = if a.transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b.transposed { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { F::one() } else { F::zero() };
    for i in 0..batch {
        let ap = a.data[i * a_stride..].as_ptr();
        let bp = b.data[i * b_stride..].as_ptr();
        let cp = c[i * m * n..].as_mut_ptr();
        // SAFETY: bounds were asserted above for every batch slice.
        unsafe {
            F::gemm(m, k, n, F::one(), ap, rsa, csa, bp, rsb, csb, beta, cp, n as isize, 1);
        }
    }
}

/// Stable softmax of each contiguous row of length `width`, written into `out`.
pub(crate) fn softmax_rows<F: Element>(x: &[F], width: usize, out: &mut [F]) {
    for (src, dst) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let max = src.iter().copied().fold(F::neg_infinity(), F::max);
        let mut total = F::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        let inv = F::one() / total;
        for d in dst.iter_mut() {
            *d = *d * inv;
        }
    }
}

/// Row-wise `log(sum(exp(row)))`.
pub(crate) fn logsumexp_rows<F: Element>(x: &[F], width: usize) -> Vec<F> {
    x.chunks_exact(width)
        .map(|row| {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let s: F = row.iter().map(|&v| (v - max).exp()).sum();
            max + s.ln()
        })
        .collect()
}
