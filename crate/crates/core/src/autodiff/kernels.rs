use rayon::prelude::*;

use crate::real::Real;

/// Minimum number of output rows a worker receives in a split gemm.
const ROW_CHUNK: usize = 64;

/// Strided read-only matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rs: isize,
    pub cs: isize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn rows(data: &'a [T], cols: usize) -> Self {
        Self {
            data,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Transposed view of a row-major `[rows, cols]` block.
    pub fn transposed(data: &'a [T], cols: usize) -> Self {
        Self {
            data,
            rs: 1,
            cs: cols as isize,
        }
    }

    fn offset_rows(self, r: usize) -> Self {
        Self {
            data: &self.data[r * self.rs as usize..],
            ..self
        }
    }
}

/// `c[m,n] = a·b + beta·c` with `c` contiguous row-major. Output rows are
/// split across the rayon pool; every element is still produced by exactly
/// one gemm call with an identical reduction order.
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    beta: T,
    c: &mut [T],
) {
    debug_assert_eq!(c.len(), m * n);
    let workers = rayon::current_num_threads();
    let flops = m * k * n;
    if workers <= 1 || m < 2 * ROW_CHUNK || flops < 1 << 20 {
        T::gemm(m, k, n, T::one(), a.data, a.rs, a.cs, b.data, b.rs, b.cs, beta, c, n as isize, 1);
        return;
    }
    let rows_per = m.div_ceil(workers).max(ROW_CHUNK);
    c.par_chunks_mut(rows_per * n)
        .enumerate()
        .for_each(|(chunk, c_block)| {
            let r0 = chunk * rows_per;
            let rows = c_block.len() / n;
            let a_block = a.offset_rows(r0);
            T::gemm(
                rows,
                k,
                n,
                T::one(),
                a_block.data,
                a_block.rs,
                a_block.cs,
                b.data,
                b.rs,
                b.cs,
                beta,
                c_block,
                n as isize,
                1,
            );
        });
}

pub(crate) fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = T::one() / sum;
    row.iter_mut().for_each(|v| *v = *v * inv);
}

/// Multi-head attention for one sample. `qkv` is `[t, 3d]`, `out` is
/// `[t, d]`, `probs` is `[heads, t, t]`.
pub(crate) fn attention_forward<T: Real>(
    qkv: &[T],
    out: &mut [T],
    probs: &mut [T],
    t: usize,
    d: usize,
    heads: usize,
) {
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let row = 3 * d as isize;
    for h in 0..heads {
        let p = &mut probs[h * t * t..(h + 1) * t * t];
        T::gemm(
            t,
            dh,
            t,
            scale,
            &qkv[h * dh..],
            row,
            1,
            &qkv[d + h * dh..],
            1,
            row,
            T::zero(),
            p,
            t as isize,
            1,
        );
        p.chunks_mut(t).for_each(softmax_row);
        T::gemm(
            t,
            t,
            dh,
            T::one(),
            p,
            t as isize,
            1,
            &qkv[2 * d + h * dh..],
            row,
            1,
            T::zero(),
            &mut out[h * dh..],
            d as isize,
            1,
        );
    }
}

/// Accumulates the attention input gradient for one sample into `dqkv`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Real>(
    qkv: &[T],
    probs: &[T],
    dout: &[T],
    dqkv: &mut [T],
    t: usize,
    d: usize,
    heads: usize,
    scratch: &mut Vec<T>,
) {
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let row = 3 * d as isize;
    scratch.resize(t * t, T::zero());
    for h in 0..heads {
        let p = &probs[h * t * t..(h + 1) * t * t];
        // dP = dO · Vᵀ
        T::gemm(
            t,
            dh,
            t,
            T::one(),
            &dout[h * dh..],
            d as isize,
            1,
            &qkv[2 * d + h * dh..],
            1,
            row,
            T::zero(),
            scratch,
            t as isize,
            1,
        );
        // dV += Pᵀ · dO
        T::gemm(
            t,
            t,
            dh,
            T::one(),
            p,
            1,
            t as isize,
            &dout[h * dh..],
            d as isize,
            1,
            T::one(),
            &mut dqkv[2 * d + h * dh..],
            row,
            1,
        );
        // dS = scale · P ⊙ (dP − rowsum(dP ⊙ P))
        for (ds_row, p_row) in scratch.chunks_mut(t).zip(p.chunks(t)) {
            let dot = ds_row
                .iter()
                .zip(p_row)
                .fold(T::zero(), |acc, (&g, &pv)| acc + g * pv);
            for (g, &pv) in ds_row.iter_mut().zip(p_row) {
                *g = scale * pv * (*g - dot);
            }
        }
        // dQ += dS · K
        T::gemm(
            t,
            t,
            dh,
            T::one(),
            scratch,
            t as isize,
            1,
            &qkv[d + h * dh..],
            row,
            1,
            T::one(),
            &mut dqkv[h * dh..],
            row,
            1,
        );
        // dK += dSᵀ · Q
        T::gemm(
            t,
            t,
            dh,
            T::one(),
            scratch,
            1,
            t as isize,
            &qkv[h * dh..],
            row,
            1,
            T::one(),
            &mut dqkv[d + h * dh..],
            row,
            1,
        );
    }
}

/// Normalises each row of `x` in place into `xhat`, returning `1/σ` per row.
pub(crate) fn normalize_rows<T: Real>(x: &[T], xhat: &mut [T], rstd: &mut [T], d: usize, eps: T) {
    let inv_d = T::one() / T::lit(d as f64);
    xhat.par_chunks_mut(d)
        .zip(x.par_chunks(d))
        .zip(rstd.par_iter_mut())
        .for_each(|((out, row), r)| {
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
            let var = row
                .iter()
                .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                * inv_d;
            let inv = T::one() / (var + eps).sqrt();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            *r = inv;
        });
}
