use rayon::prelude::*;

use super::kernels::{self, MatRef};
use super::{BatchStats, GradSink, Node, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::RngStream;
use crate::tensor::{broadcast_index, matmul_shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Exact form `x·Φ(x)` with the Gaussian CDF.
    Gelu,
}

impl Activation {
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Gelu => x * gauss_cdf(x),
        }
    }

    fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => {
                let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(0.398_942_280_401_432_7);
                gauss_cdf(x) + x * pdf
            }
        }
    }
}

fn gauss_cdf<T: Real>(x: T) -> T {
    T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

impl<T: Real> Tape<T> {
    /// Batched matrix product `[…, m, k] × […, k, n] → […, m, n]` with
    /// broadcast batch dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (out_shape, m, k, n) = matmul_shape(&sa, &sb)?;
        let out_batch = &out_shape[..out_shape.len() - 2];
        let batches: usize = out_batch.iter().product();
        let mut out = vec![T::zero(); batches * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batches {
            let ai = broadcast_index(i, out_batch, &sa[..sa.len() - 2]);
            let bi = broadcast_index(i, out_batch, &sb[..sb.len() - 2]);
            kernels::gemm(
                m,
                k,
                n,
                MatRef::rows(&av[ai * m * k..(ai + 1) * m * k], k),
                MatRef::rows(&bv[bi * k * n..(bi + 1) * k * n], n),
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let value = Tensor::from_vec(&out_shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    /// Affine map over the trailing dimension: `x[…, in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sw.len() != 2 || *sx.last().unwrap() != sw[0] {
            return Err(Error::shape(format!("linear: input {sx:?} vs weight {sw:?}")));
        }
        let (k, n) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(Error::shape(format!(
                    "linear: bias {:?} vs output width {n}",
                    self.shape(b)
                )));
            }
        }
        let m = self.value(x).numel() / k;
        let mut out = match b {
            Some(b) => {
                let bias = self.value(b).data();
                let mut o = Vec::with_capacity(m * n);
                for _ in 0..m {
                    o.extend_from_slice(bias);
                }
                o
            }
            None => vec![T::zero(); m * n],
        };
        kernels::gemm(
            m,
            k,
            n,
            MatRef::rows(self.value(x).data(), k),
            MatRef::rows(self.value(w).data(), n),
            T::one(),
            &mut out,
        );
        let mut shape = sx;
        *shape.last_mut().unwrap() = n;
        let value = Tensor::from_vec(&shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    /// Elementwise sum; `b` may match a trailing suffix of `a`'s shape and is
    /// then broadcast over the leading dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(format!("add: {sa:?} + {sb:?}")));
        }
        let bv = self.value(b).data();
        let inner = bv.len();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(inner) {
            chunk.iter_mut().zip(bv).for_each(|(o, &y)| *o = *o + y);
        }
        let value = Tensor::from_vec(self.shape(a), out)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "mul: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::from_vec(self.shape(a), out)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|v| v * c);
        self.push(value, Op::Scale { a, c }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &v| acc + v);
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().fold(T::zero(), |acc, &v| acc + v) / T::lit(t.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean { a }, &[a])
    }

    pub fn activation(&mut self, a: Var, f: Activation) -> Var {
        let src = self.value(a);
        let mut out = vec![T::zero(); src.numel()];
        out.par_chunks_mut(4096)
            .zip(src.data().par_chunks(4096))
            .for_each(|(o, x)| o.iter_mut().zip(x).for_each(|(o, &x)| *o = f.apply(x)));
        let value = Tensor::from_vec(src.shape(), out).expect("same shape");
        self.push(value, Op::Act { a, f }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Gelu)
    }

    /// Softmax over the trailing dimension, max-shifted for stability.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let mut value = self.value(a).clone();
        let d = value.last_dim();
        if d == 0 || value.numel() == 0 {
            return Err(Error::shape(format!("softmax of an empty tensor {:?}", value.shape())));
        }
        value.data_mut().chunks_mut(d).for_each(kernels::softmax_row);
        Ok(self.push(value, Op::Softmax { a }, &[a]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::param(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(format!(
                "layer_norm: input {:?}, gamma {:?}, beta {:?}",
                self.shape(x),
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let src = self.value(x);
        let rows = src.rows();
        let mut xhat = vec![T::zero(); src.numel()];
        let mut rstd = vec![T::zero(); rows];
        kernels::normalize_rows(src.data(), &mut xhat, &mut rstd, d, T::lit(eps));
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        out.par_chunks_mut(d).for_each(|row| {
            for ((o, &gv), &bv) in row.iter_mut().zip(g).zip(b) {
                *o = *o * gv + bv;
            }
        });
        let value = Tensor::from_vec(src.shape(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    fn check_batch_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(usize, usize)> {
        if eps <= 0.0 {
            return Err(Error::param(format!("batch_norm eps must be > 0, got {eps}")));
        }
        let s = self.shape(x);
        if s.len() != 2 || self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return Err(Error::shape(format!(
                "batch_norm: input {s:?}, gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        Ok((s[0], s[1]))
    }

    fn push_batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
        batch_stats: bool,
    ) -> Var {
        let c = rstd.len();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| v * g[i % c] + b[i % c])
            .collect();
        let value = Tensor::from_vec(self.shape(x), out).expect("same shape");
        self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                batch_stats,
            },
            &[x, gamma, beta],
        )
    }

    /// Batch norm over the rows of a `[B, C]` input using the batch's own
    /// statistics. Also returns the statistics for running-average updates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats<T>)> {
        let (rows, c) = self.check_batch_norm(x, gamma, beta, eps)?;
        let data = self.value(x).data();
        let inv_n = T::one() / T::lit(rows as f64);
        let mut mean = vec![T::zero(); c];
        for row in data.chunks(c) {
            mean.iter_mut().zip(row).for_each(|(m, &v)| *m = *m + v);
        }
        mean.iter_mut().for_each(|m| *m = *m * inv_n);
        let mut var = vec![T::zero(); c];
        for row in data.chunks(c) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s = *s + (v - m) * (v - m);
            }
        }
        let biased: Vec<T> = var.iter().map(|&s| s * inv_n).collect();
        let unbiased: Vec<T> = if rows > 1 {
            var.iter().map(|&s| s / T::lit((rows - 1) as f64)).collect()
        } else {
            biased.clone()
        };
        let rstd: Vec<T> = biased
            .iter()
            .map(|&v| T::one() / (v + T::lit(eps)).sqrt())
            .collect();
        let xhat: Vec<T> = data
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - mean[i % c]) * rstd[i % c])
            .collect();
        let out = self.push_batch_norm(x, gamma, beta, xhat, rstd, true);
        Ok((
            out,
            BatchStats {
                mean,
                var: unbiased,
            },
        ))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (_, c) = self.check_batch_norm(x, gamma, beta, eps)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm: running statistics width mismatch"));
        }
        let rstd: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + T::lit(eps)).sqrt())
            .collect();
        let xhat: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - running_mean[i % c]) * rstd[i % c])
            .collect();
        Ok(self.push_batch_norm(x, gamma, beta, xhat, rstd, false))
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - rate)`.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut RngStream) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::param(format!("dropout rate must lie in [0, 1), got {rate}")));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let scale = T::lit(1.0 / (1.0 - rate));
        let src = self.value(a);
        let mask: Vec<u8> = (0..src.numel())
            .map(|_| u8::from(rng.uniform() >= rate))
            .collect();
        let out = src
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m == 1 { v * scale } else { T::zero() })
            .collect();
        let value = Tensor::from_vec(src.shape(), out)?;
        Ok(self.push(value, Op::Dropout { a, mask, scale }, &[a]))
    }

    /// Scaled dot-product multi-head self-attention core.
    ///
    /// `qkv` is `[B, T, 3D]` holding the query, key and value projections
    /// side by side; the result is `[B, T, D]` with heads concatenated.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let s = self.shape(qkv).to_vec();
        if s.len() != 3 || !s[2].is_multiple_of(3) || heads == 0 || !(s[2] / 3).is_multiple_of(heads) {
            return Err(Error::shape(format!(
                "attention: qkv {s:?} incompatible with {heads} heads"
            )));
        }
        let (b, t, d) = (s[0], s[1], s[2] / 3);
        let mut out = vec![T::zero(); b * t * d];
        let mut probs = vec![T::zero(); b * heads * t * t];
        let src = self.value(qkv).data();
        out.par_chunks_mut(t * d)
            .zip(probs.par_chunks_mut(heads * t * t))
            .zip(src.par_chunks(t * 3 * d))
            .for_each(|((o, p), q)| kernels::attention_forward(q, o, p, t, d, heads));
        let value = Tensor::from_vec(&[b, t, d], out)?;
        Ok(self.push(value, Op::Attention { qkv, heads, probs }, &[qkv]))
    }

    /// `[B, T, D] → [B, 2D]`: per-feature max over tokens, then mean. The
    /// mean is accumulated relative to the first token so a constant
    /// sequence pools to exactly `[c; c]`.
    pub fn pool_max_mean(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(Error::shape(format!("pool expects [B, T, D], got {s:?}")));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        if t == 0 {
            return Err(Error::shape("pool over an empty token sequence"));
        }
        let src = self.value(a).data();
        let inv_t = T::one() / T::lit(t as f64);
        let mut out = vec![T::zero(); b * 2 * d];
        let mut argmax = vec![0u32; b * d];
        for bi in 0..b {
            let block = &src[bi * t * d..(bi + 1) * t * d];
            for j in 0..d {
                let first = block[j];
                let mut best = first;
                let mut arg = 0;
                let mut shifted = T::zero();
                for ti in 0..t {
                    let v = block[ti * d + j];
                    if v > best {
                        best = v;
                        arg = ti;
                    }
                    shifted = shifted + (v - first);
                }
                out[bi * 2 * d + j] = best;
                out[bi * 2 * d + d + j] = first + shifted * inv_t;
                argmax[bi * d + j] = arg as u32;
            }
        }
        let value = Tensor::from_vec(&[b, 2 * d], out)?;
        Ok(self.push(value, Op::PoolMaxMean { a, argmax }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { a }, &[a]))
    }

    /// Records a scalar whose gradients with respect to `inputs` are already
    /// known (fused losses evaluate value and gradient together).
    pub fn custom_scalar(&mut self, value: T, inputs: Vec<(Var, Vec<T>)>) -> Result<Var> {
        for (v, g) in &inputs {
            if g.len() != self.value(*v).numel() {
                return Err(Error::shape("custom op gradient length mismatch"));
            }
        }
        let vars: Vec<Var> = inputs.iter().map(|(v, _)| *v).collect();
        Ok(self.push(Tensor::scalar(value), Op::Custom { inputs }, &vars))
    }
}

pub(crate) fn backward_node<T: Real>(
    nodes: &[Node<T>],
    i: usize,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let mut sink = GradSink { nodes, grads };
    let node = &nodes[i];
    let val = |v: Var| -> &Tensor<T> { &nodes[v.0].value };
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (sa, sb) = (val(*a).shape(), val(*b).shape());
            let out_shape = node.value.shape();
            let out_batch = &out_shape[..out_shape.len() - 2];
            let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let n = sb[sb.len() - 1];
            let batches: usize = out_batch.iter().product();
            for bi in 0..batches {
                let ai = broadcast_index(bi, out_batch, &sa[..sa.len() - 2]);
                let bj = broadcast_index(bi, out_batch, &sb[..sb.len() - 2]);
                let gblk = &g[bi * m * n..(bi + 1) * m * n];
                if sink.wants(*a) {
                    let bdata = &val(*b).data()[bj * k * n..(bj + 1) * k * n];
                    let da = &mut sink.buf(*a)[ai * m * k..(ai + 1) * m * k];
                    kernels::gemm(
                        m,
                        n,
                        k,
                        MatRef::rows(gblk, n),
                        MatRef::transposed(bdata, n),
                        T::one(),
                        da,
                    );
                }
                if sink.wants(*b) {
                    let adata = &val(*a).data()[ai * m * k..(ai + 1) * m * k];
                    let db = &mut sink.buf(*b)[bj * k * n..(bj + 1) * k * n];
                    kernels::gemm(
                        k,
                        m,
                        n,
                        MatRef::transposed(adata, k),
                        MatRef::rows(gblk, n),
                        T::one(),
                        db,
                    );
                }
            }
        }
        Op::Linear { x, w, b } => {
            let (k, n) = (val(*w).shape()[0], val(*w).shape()[1]);
            let m = val(*x).numel() / k;
            if sink.wants(*x) {
                let wd = val(*w).data();
                kernels::gemm(
                    m,
                    n,
                    k,
                    MatRef::rows(g, n),
                    MatRef::transposed(wd, n),
                    T::one(),
                    sink.buf(*x),
                );
            }
            if sink.wants(*w) {
                let xd = val(*x).data();
                kernels::gemm(
                    k,
                    m,
                    n,
                    MatRef::transposed(xd, k),
                    MatRef::rows(g, n),
                    T::one(),
                    sink.buf(*w),
                );
            }
            if let Some(b) = b {
                if sink.wants(*b) {
                    let db = sink.buf(*b);
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v);
                    }
                }
            }
        }
        Op::Add { a, b } => {
            sink.add(*a, g);
            if sink.wants(*b) {
                let inner = val(*b).numel();
                let db = sink.buf(*b);
                for chunk in g.chunks(inner) {
                    db.iter_mut().zip(chunk).for_each(|(d, &v)| *d = *d + v);
                }
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if sink.wants(*a) {
                let ga: Vec<T> = g.iter().zip(bv).map(|(&g, &y)| g * y).collect();
                sink.add(*a, &ga);
            }
            if sink.wants(*b) {
                let gb: Vec<T> = g.iter().zip(av).map(|(&g, &x)| g * x).collect();
                sink.add(*b, &gb);
            }
        }
        Op::Scale { a, c } => {
            let ga: Vec<T> = g.iter().map(|&v| v * *c).collect();
            sink.add(*a, &ga);
        }
        Op::Sum { a } => {
            let n = val(*a).numel();
            sink.add(*a, &vec![g[0]; n]);
        }
        Op::Mean { a } => {
            let n = val(*a).numel();
            sink.add(*a, &vec![g[0] / T::lit(n as f64); n]);
        }
        Op::Act { a, f } => {
            let x = val(*a).data();
            let mut ga = vec![T::zero(); x.len()];
            ga.par_chunks_mut(4096)
                .zip(x.par_chunks(4096).zip(g.par_chunks(4096)))
                .for_each(|(o, (x, g))| {
                    for ((o, &x), &g) in o.iter_mut().zip(x).zip(g) {
                        *o = g * f.derivative(x);
                    }
                });
            sink.add(*a, &ga);
        }
        Op::Softmax { a } => {
            let y = node.value.data();
            let d = node.value.last_dim();
            let mut ga = vec![T::zero(); y.len()];
            for ((o, yr), gr) in ga.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                let dot = yr.iter().zip(gr).fold(T::zero(), |acc, (&y, &g)| acc + y * g);
                for ((o, &y), &g) in o.iter_mut().zip(yr).zip(gr) {
                    *o = y * (g - dot);
                }
            }
            sink.add(*a, &ga);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let d = node.value.last_dim();
            if sink.wants(*gamma) || sink.wants(*beta) {
                let mut dg = vec![T::zero(); d];
                let mut db = vec![T::zero(); d];
                for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        dg[j] = dg[j] + gr[j] * xr[j];
                        db[j] = db[j] + gr[j];
                    }
                }
                sink.add(*gamma, &dg);
                sink.add(*beta, &db);
            }
            if sink.wants(*x) {
                let gam = val(*gamma).data();
                let inv_d = T::one() / T::lit(d as f64);
                let mut dx = vec![T::zero(); g.len()];
                dx.par_chunks_mut(d)
                    .zip(g.par_chunks(d).zip(xhat.par_chunks(d)))
                    .zip(rstd.par_iter())
                    .for_each(|((o, (gr, xr)), &r)| {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dxh = gr[j] * gam[j];
                            s1 = s1 + dxh;
                            s2 = s2 + dxh * xr[j];
                        }
                        s1 = s1 * inv_d;
                        s2 = s2 * inv_d;
                        for j in 0..d {
                            o[j] = r * (gr[j] * gam[j] - s1 - xr[j] * s2);
                        }
                    });
                sink.add(*x, &dx);
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
            batch_stats,
        } => {
            let c = rstd.len();
            let rows = g.len() / c;
            let mut dg = vec![T::zero(); c];
            let mut db = vec![T::zero(); c];
            for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                for j in 0..c {
                    dg[j] = dg[j] + gr[j] * xr[j];
                    db[j] = db[j] + gr[j];
                }
            }
            if sink.wants(*x) {
                let gam = val(*gamma).data();
                let inv_n = T::one() / T::lit(rows as f64);
                let mut dx = vec![T::zero(); g.len()];
                for ((o, gr), xr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        o[j] = if *batch_stats {
                            gam[j] * rstd[j] * (gr[j] - db[j] * inv_n - xr[j] * dg[j] * inv_n)
                        } else {
                            gam[j] * rstd[j] * gr[j]
                        };
                    }
                }
                sink.add(*x, &dx);
            }
            sink.add(*gamma, &dg);
            sink.add(*beta, &db);
        }
        Op::Dropout { a, mask, scale } => {
            let ga: Vec<T> = g
                .iter()
                .zip(mask)
                .map(|(&v, &m)| if m == 1 { v * *scale } else { T::zero() })
                .collect();
            sink.add(*a, &ga);
        }
        Op::Attention { qkv, heads, probs } => {
            if sink.wants(*qkv) {
                let s = node.value.shape();
                let (t, d) = (s[1], s[2]);
                let heads = *heads;
                let q = val(*qkv).data();
                let dq = sink.buf(*qkv);
                dq.par_chunks_mut(t * 3 * d)
                    .zip(q.par_chunks(t * 3 * d))
                    .zip(probs.par_chunks(heads * t * t).zip(g.par_chunks(t * d)))
                    .for_each_init(Vec::new, |scratch, ((dq, q), (p, go))| {
                        kernels::attention_backward(q, p, go, dq, t, d, heads, scratch)
                    });
            }
        }
        Op::PoolMaxMean { a, argmax } => {
            if sink.wants(*a) {
                let s = val(*a).shape();
                let (b, t, d) = (s[0], s[1], s[2]);
                let inv_t = T::one() / T::lit(t as f64);
                let da = sink.buf(*a);
                for bi in 0..b {
                    for j in 0..d {
                        let gmax = g[bi * 2 * d + j];
                        let gmean = g[bi * 2 * d + d + j] * inv_t;
                        for ti in 0..t {
                            let idx = bi * t * d + ti * d + j;
                            da[idx] = da[idx] + gmean;
                        }
                        let idx = bi * t * d + argmax[bi * d + j] as usize * d + j;
                        da[idx] = da[idx] + gmax;
                    }
                }
            }
        }
        Op::Reshape { a } => sink.add(*a, g),
        Op::Custom { inputs } => {
            for (v, local) in inputs {
                if sink.wants(*v) {
                    let scaled: Vec<T> = local.iter().map(|&l| l * g[0]).collect();
                    sink.add(*v, &scaled);
                }
            }
        }
    }
}
