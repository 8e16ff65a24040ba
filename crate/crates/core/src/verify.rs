//! Slow, direct reference implementations used to cross-check the optimised
//! code paths (in tests and in the `selftest` command).

use crate::model::ParamStore;

/// `Σ_t a[i,t]·b[t,j]` by three nested loops.
pub fn matmul_naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

fn cosine(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let nx: f64 = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let ny: f64 = y.iter().map(|a| a * a).sum::<f64>().sqrt();
    dot / (nx * ny)
}

/// One direction of the loss, written exactly as a ratio of exponentials.
fn nt_xent_term(x: &[Vec<f64>], y: &[Vec<f64>], i: usize, tau: f64) -> f64 {
    let e = |a: &[f64], b: &[f64]| (cosine(a, b) / tau).exp();
    let num = e(&x[i], &y[i]);
    let mut den = 0.0;
    for k in 0..x.len() {
        if k != i {
            den += e(&x[i], &x[k]);
        }
    }
    for yk in y {
        den += e(&x[i], yk);
    }
    -(num / den).ln()
}

/// `1/(2N) Σ_i [ℓ(x→y, i) + ℓ(y→x, i)]` without any stabilisation.
pub fn nt_xent_direct(x: &[Vec<f64>], y: &[Vec<f64>], tau: f64) -> f64 {
    let n = x.len();
    let mut total = 0.0;
    for i in 0..n {
        total += nt_xent_term(x, y, i, tau) + nt_xent_term(y, x, i, tau);
    }
    total / (2.0 * n as f64)
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Max-min selection recomputed from scratch at every step.
pub fn fps_brute_force(points: &[Vec<f64>], g: usize, first: usize) -> Vec<usize> {
    let mut picked = vec![first];
    while picked.len() < g {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (i, p) in points.iter().enumerate() {
            if picked.contains(&i) {
                continue;
            }
            let d = picked
                .iter()
                .map(|&j| sq(p, &points[j]))
                .fold(f64::INFINITY, f64::min);
            if d > best.0 {
                best = (d, i);
            }
        }
        picked.push(best.1);
    }
    picked
}

/// Neighbours by a full stable sort on distance.
pub fn knn_full_sort(points: &[Vec<f64>], center: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| {
        sq(&points[a], center)
            .partial_cmp(&sq(&points[b], center))
            .unwrap()
    });
    idx.truncate(k);
    idx
}

fn layer_norm_row(x: &[f64], g: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .zip(g.iter().zip(b))
        .map(|(v, (gg, bb))| (v - mean) / (var + eps).sqrt() * gg + bb)
        .collect()
}

fn affine(x: &[f64], w: &[f64], b: &[f64], fan_out: usize) -> Vec<f64> {
    let fan_in = x.len();
    (0..fan_out)
        .map(|j| b[j] + (0..fan_in).map(|i| x[i] * w[i * fan_out + j]).sum::<f64>())
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// One pre-LN encoder block (no dropout) over a single `[T, D]` sequence,
/// reading weights named `encoder.{layer}.*` from `store`.
pub fn encoder_block_reference(
    store: &ParamStore<f64>,
    layer: usize,
    heads: usize,
    z: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let p = |s: &str| store.get(&format!("encoder.{layer}.{s}")).unwrap().data();
    let d = z[0].len();
    let t = z.len();
    let dh = d / heads;
    let hidden = p("mlp.fc1.bias").len();

    let qkv: Vec<Vec<f64>> = z
        .iter()
        .map(|row| {
            let h = layer_norm_row(row, p("ln1.gamma"), p("ln1.beta"), 1e-5);
            affine(&h, p("attn.qkv.weight"), p("attn.qkv.bias"), 3 * d)
        })
        .collect();
    let mut attended = vec![vec![0.0; d]; t];
    for h in 0..heads {
        let q = |i: usize| &qkv[i][h * dh..(h + 1) * dh];
        let k = |i: usize| &qkv[i][d + h * dh..d + (h + 1) * dh];
        let v = |i: usize| &qkv[i][2 * d + h * dh..2 * d + (h + 1) * dh];
        for i in 0..t {
            let scores: Vec<f64> = (0..t)
                .map(|j| q(i).iter().zip(k(j)).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let total: f64 = scores.iter().map(|s| s.exp()).sum();
            for j in 0..t {
                let w = scores[j].exp() / total;
                for c in 0..dh {
                    attended[i][h * dh + c] += w * v(j)[c];
                }
            }
        }
    }
    let mid: Vec<Vec<f64>> = attended
        .iter()
        .zip(z)
        .map(|(a, zr)| {
            let o = affine(a, p("attn.proj.weight"), p("attn.proj.bias"), d);
            o.iter().zip(zr).map(|(x, y)| x + y).collect()
        })
        .collect();
    mid.iter()
        .map(|row| {
            let h = layer_norm_row(row, p("ln2.gamma"), p("ln2.beta"), 1e-5);
            let h: Vec<f64> = affine(&h, p("mlp.fc1.weight"), p("mlp.fc1.bias"), hidden)
                .into_iter()
                .map(gelu)
                .collect();
            let o = affine(&h, p("mlp.fc2.weight"), p("mlp.fc2.bias"), d);
            o.iter().zip(row).map(|(x, y)| x + y).collect()
        })
        .collect()
}

/// Plain Adam without weight decay, for trajectory comparison.
pub struct AdamReference {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: i32,
}

impl AdamReference {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) {
        self.t += 1;
        for i in 0..theta.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            let mh = self.m[i] / (1.0 - b1.powi(self.t));
            let vh = self.v[i] / (1.0 - b2.powi(self.t));
            theta[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}
