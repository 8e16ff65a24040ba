//! Intra-modal and cross-modal NT-Xent objectives.
//!
//! Similarities, the log-sum-exp and the gradients are always evaluated in
//! `f64`, whatever the activation precision.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastMode {
    ImcOnly,
    CmcOnly,
    Both,
}

impl ContrastMode {
    /// Row label used in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            ContrastMode::ImcOnly => "IMC only",
            ContrastMode::CmcOnly => "CMC only",
            ContrastMode::Both => "IMC & CMC",
        }
    }

    pub fn needs_second_view(self) -> bool {
        self != ContrastMode::CmcOnly
    }

    pub fn needs_image(self) -> bool {
        self != ContrastMode::ImcOnly
    }
}

impl fmt::Display for ContrastMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContrastMode::ImcOnly => "imc",
            ContrastMode::CmcOnly => "cmc",
            ContrastMode::Both => "both",
        })
    }
}

impl FromStr for ContrastMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "imc" | "imc_only" => Ok(ContrastMode::ImcOnly),
            "cmc" | "cmc_only" => Ok(ContrastMode::CmcOnly),
            "both" => Ok(ContrastMode::Both),
            other => Err(Error::param(format!(
                "unknown contrast mode {other:?} (expected imc, cmc or both)"
            ))),
        }
    }
}

/// Which point features are paired with the image features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmcSource {
    /// Reuse the first augmented view.
    FirstView,
    /// Run an extra forward pass on the un-augmented cloud.
    Unaugmented,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastConfig {
    pub tau: f64,
    pub alpha: f64,
    pub mode: ContrastMode,
    pub cmc_source: CmcSource,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            alpha: 1.0,
            mode: ContrastMode::Both,
            cmc_source: CmcSource::FirstView,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::param(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::param(format!("alpha must be nonnegative, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Loss value with gradients for both inputs.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub value: f64,
    pub grad_a: Vec<f64>,
    pub grad_b: Vec<f64>,
}

fn normalize_rows(x: &[f64], n: usize, d: usize, what: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut u = vec![0.0; n * d];
    let mut norms = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("{what} row {i} has non-finite norm {norm}")));
        }
        if !(norm > 0.0) {
            return Err(Error::contract(format!(
                "{what} row {i} has norm {norm}; cosine similarity is undefined"
            )));
        }
        norms[i] = norm;
        u[i * d..(i + 1) * d]
            .iter_mut()
            .zip(row)
            .for_each(|(o, &v)| *o = v / norm);
    }
    Ok((u, norms))
}

fn gram(a: &[f64], b: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            s[i * n + k] = a[i * d..(i + 1) * d]
                .iter()
                .zip(&b[k * d..(k + 1) * d])
                .map(|(x, y)| x * y)
                .sum();
        }
    }
    s
}

/// Accumulates the one-directional term
/// `Σ_i −log(e^{x_ii} / (Σ_{k≠i} e^{s_ii'k} + Σ_k e^{x_ik}))`, scaled by `w`,
/// where `cross = S_ab / τ` and `intra = S_aa / τ`.
/// Gradients w.r.t. the similarity matrices are added to `d_cross` (indexed
/// through `cross_at`) and `d_intra`.
fn directional(
    cross: impl Fn(usize, usize) -> f64,
    intra: &[f64],
    n: usize,
    inv_tau: f64,
    w: f64,
    mut d_cross: impl FnMut(usize, usize, f64),
    d_intra: &mut [f64],
) -> f64 {
    let mut total = 0.0;
    let mut logits = Vec::with_capacity(2 * n);
    for i in 0..n {
        logits.clear();
        for k in 0..n {
            logits.push(cross(i, k) * inv_tau);
        }
        for k in 0..n {
            if k != i {
                logits.push(intra[i * n + k] * inv_tau);
            }
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
        let lse = max + z.ln();
        total += lse - logits[i];
        for k in 0..n {
            let p = (logits[k] - lse).exp();
            let delta = if k == i { 1.0 } else { 0.0 };
            d_cross(i, k, w * (p - delta) * inv_tau);
        }
        let mut j = n;
        for k in 0..n {
            if k != i {
                let p = (logits[j] - lse).exp();
                d_intra[i * n + k] += w * p * inv_tau;
                j += 1;
            }
        }
    }
    w * total
}

/// Symmetrised NT-Xent between row-paired `a` and `b` (`[N, d]`, row-major).
///
/// Each direction uses intra-set negatives `k ≠ i` plus every cross-set
/// similarity (the positive included), and the two directions are averaged
/// with weight `1 / 2N`.
pub fn nt_xent(a: &[f64], b: &[f64], n: usize, d: usize, tau: f64) -> Result<LossGrad> {
    if n == 0 || d == 0 {
        return Err(Error::shape("contrastive loss needs N ≥ 1 rows of width ≥ 1"));
    }
    if a.len() != n * d || b.len() != n * d {
        return Err(Error::shape(format!(
            "contrastive inputs must both be [{n}, {d}], got {} and {} values",
            a.len(),
            b.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::param(format!("tau must be positive, got {tau}")));
    }
    let (ua, na) = normalize_rows(a, n, d, "first input")?;
    let (ub, nb) = normalize_rows(b, n, d, "second input")?;
    let s_ab = gram(&ua, &ub, n, d);
    let s_aa = gram(&ua, &ua, n, d);
    let s_bb = gram(&ub, &ub, n, d);
    let inv_tau = 1.0 / tau;
    let w = 1.0 / (2.0 * n as f64);

    let mut d_ab = vec![0.0; n * n];
    let mut d_aa = vec![0.0; n * n];
    let mut d_bb = vec![0.0; n * n];
    let mut value = directional(
        |i, k| s_ab[i * n + k],
        &s_aa,
        n,
        inv_tau,
        w,
        |i, k, g| d_ab[i * n + k] += g,
        &mut d_aa,
    );
    value += directional(
        |i, k| s_ab[k * n + i],
        &s_bb,
        n,
        inv_tau,
        w,
        |i, k, g| d_ab[k * n + i] += g,
        &mut d_bb,
    );

    // dU_a = dS_ab U_b + (dS_aa + dS_aaᵀ) U_a, and symmetrically for b.
    let mut gu_a = vec![0.0; n * d];
    let mut gu_b = vec![0.0; n * d];
    for i in 0..n {
        for k in 0..n {
            let g_ab = d_ab[i * n + k];
            let g_aa = d_aa[i * n + k] + d_aa[k * n + i];
            let g_bb = d_bb[i * n + k] + d_bb[k * n + i];
            let g_ba = d_ab[k * n + i];
            for t in 0..d {
                gu_a[i * d + t] += g_ab * ub[k * d + t] + g_aa * ua[k * d + t];
                gu_b[i * d + t] += g_ba * ua[k * d + t] + g_bb * ub[k * d + t];
            }
        }
    }
    let back = |u: &[f64], gu: &[f64], norms: &[f64]| -> Vec<f64> {
        let mut g = vec![0.0; n * d];
        for i in 0..n {
            let ur = &u[i * d..(i + 1) * d];
            let gr = &gu[i * d..(i + 1) * d];
            let dot: f64 = ur.iter().zip(gr).map(|(x, y)| x * y).sum();
            for t in 0..d {
                g[i * d + t] = (gr[t] - ur[t] * dot) / norms[i];
            }
        }
        g
    };
    Ok(LossGrad {
        value,
        grad_a: back(&ua, &gu_a, &na),
        grad_b: back(&ub, &gu_b, &nb),
    })
}

fn as_rows<T: Real>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, Vec<f64>)> {
    if t.ndim() != 2 {
        return Err(Error::shape(format!("{what} must be [N, out_dim], got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1], t.to_f64_vec()))
}

fn pair_value<T: Real>(a: &Tensor<T>, b: &Tensor<T>, tau: f64, names: (&str, &str)) -> Result<f64> {
    let (n, d, av) = as_rows(a, names.0)?;
    let (nb, db, bv) = as_rows(b, names.1)?;
    if (n, d) != (nb, db) {
        return Err(Error::shape(format!(
            "{} {:?} and {} {:?} must have equal shapes",
            names.0,
            a.shape(),
            names.1,
            b.shape()
        )));
    }
    Ok(nt_xent(&av, &bv, n, d, tau)?.value)
}

/// Intra-modal loss between the two augmented views' point features.
pub fn imc_loss<T: Real>(p_t1: &Tensor<T>, p_t2: &Tensor<T>, tau: f64) -> Result<f64> {
    pair_value(p_t1, p_t2, tau, ("p_t1", "p_t2"))
}

/// Cross-modal loss between point features and paired image features.
pub fn cmc_loss<T: Real>(p: &Tensor<T>, f: &Tensor<T>, tau: f64) -> Result<f64> {
    pair_value(p, f, tau, ("p", "f"))
}

/// Components of one evaluation of the combined objective.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub imc: Option<f64>,
    pub cmc: Option<f64>,
    pub total: f64,
}

/// `L = L_imc + α·L_cmc` (or a single term, per `cfg.mode`) recorded on the
/// tape as one scalar node. `p_cmc` is the point feature paired with `f`.
pub fn combined_loss<T: Real>(
    tape: &mut Tape<T>,
    p_t1: Var,
    p_t2: Option<Var>,
    f: Option<Var>,
    p_cmc: Option<Var>,
    cfg: &ContrastConfig,
) -> Result<(Var, LossParts)> {
    cfg.validate()?;
    let rows = |tape: &Tape<T>, v: Var, what: &str| as_rows(tape.value(v), what);
    let (n, d, p1) = rows(tape, p_t1, "p_t1")?;
    let check = |nn: usize, dd: usize, what: &str| -> Result<()> {
        if (nn, dd) != (n, d) {
            return Err(Error::shape(format!(
                "{what} is [{nn}, {dd}] but p_t1 is [{n}, {d}]"
            )));
        }
        Ok(())
    };

    let mut grads: Vec<(Var, Vec<f64>)> = Vec::new();
    let mut add = |v: Var, g: Vec<f64>, scale: f64| {
        let g: Vec<f64> = g.into_iter().map(|x| x * scale).collect();
        if let Some((_, acc)) = grads.iter_mut().find(|(w, _)| *w == v) {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        } else {
            grads.push((v, g));
        }
    };

    let mut parts = LossParts {
        imc: None,
        cmc: None,
        total: 0.0,
    };
    if cfg.mode.needs_second_view() {
        let v2 = p_t2.ok_or_else(|| {
            Error::contract(format!("mode {} requires the second point view", cfg.mode))
        })?;
        let (nn, dd, p2) = rows(tape, v2, "p_t2")?;
        check(nn, dd, "p_t2")?;
        let lg = nt_xent(&p1, &p2, n, d, cfg.tau)?;
        parts.imc = Some(lg.value);
        parts.total = lg.value;
        add(p_t1, lg.grad_a, 1.0);
        add(v2, lg.grad_b, 1.0);
    }
    if cfg.mode.needs_image() {
        let fv = f.ok_or_else(|| {
            Error::contract(format!("mode {} requires image features", cfg.mode))
        })?;
        let pv = p_cmc.unwrap_or(p_t1);
        let (nn, dd, fd) = rows(tape, fv, "f")?;
        check(nn, dd, "f")?;
        let (nn, dd, pd) = rows(tape, pv, "p_cmc")?;
        check(nn, dd, "p_cmc")?;
        let lg = nt_xent(&pd, &fd, n, d, cfg.tau)?;
        parts.cmc = Some(lg.value);
        let weight = if cfg.mode == ContrastMode::Both { cfg.alpha } else { 1.0 };
        parts.total += weight * lg.value;
        add(pv, lg.grad_a, weight);
        add(fv, lg.grad_b, weight);
    }
    let inputs = grads
        .into_iter()
        .map(|(v, g)| (v, g.into_iter().map(T::lit).collect()))
        .collect();
    let out = tape.custom_scalar(T::lit(parts.total), inputs)?;
    Ok((out, parts))
}

/// Value-only combined objective on plain tensors.
pub fn combined_value<T: Real>(
    p_t1: &Tensor<T>,
    p_t2: Option<&Tensor<T>>,
    f: Option<&Tensor<T>>,
    cfg: &ContrastConfig,
) -> Result<LossParts> {
    let mut tape = Tape::<T>::new();
    let a = tape.constant(p_t1.clone());
    let b = p_t2.map(|t| tape.constant(t.clone()));
    let c = f.map(|t| tape.constant(t.clone()));
    Ok(combined_loss(&mut tape, a, b, c, None, cfg)?.1)
}
