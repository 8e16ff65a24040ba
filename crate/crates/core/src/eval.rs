//! Frozen-feature evaluation: embedding extraction, linear probing and the
//! N-way K-shot protocol.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{GradMode, ViPFormer};
use crate::rng::{Purpose, RngStream};
use crate::tensor::Tensor;

/// Which representation is exported as the sample's feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    /// Output of the contrastive output adapter (`out_dim`).
    Adapter,
    /// Max+mean pooled encoder tokens (`2D`), before the adapter.
    Pooled,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedOptions {
    pub eval_seed: u64,
    pub batch_size: usize,
    pub source: FeatureSource,
}

impl Default for EmbedOptions {
    fn default() -> Self {
        Self {
            eval_seed: 0,
            batch_size: 32,
            source: FeatureSource::Adapter,
        }
    }
}

/// FPS stream for evaluating `points`, fixed by the evaluation seed and the
/// cloud's contents: equal clouds always tokenize identically, whatever
/// their position or batch.
pub fn eval_stream(eval_seed: u64, points: &Tensor<f32>) -> RngStream {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in points.data() {
        h ^= u64::from(v.to_bits());
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    RngStream::new(eval_seed).substream(Purpose::Eval, h)
}

/// One feature row per cloud, in input order. Each row depends only on its
/// cloud and `eval_seed` (see [`eval_stream`]).
pub fn extract_embeddings(
    model: &ViPFormer<f32>,
    clouds: &[&Tensor<f32>],
    opts: &EmbedOptions,
) -> Result<Tensor<f64>> {
    if clouds.is_empty() {
        return Err(Error::contract("no samples to embed"));
    }
    if opts.batch_size == 0 {
        return Err(Error::param("batch size must be positive"));
    }
    let mut rows: Vec<f64> = Vec::new();
    let mut width = 0;
    for chunk in clouds.chunks(opts.batch_size) {
        let seqs = chunk
            .iter()
            .map(|pts| model.tokenize_points(pts, &mut eval_stream(opts.eval_seed, pts)))
            .collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let mut fwd = model.bind(&mut tape, false, GradMode::None);
        let mut unused = RngStream::new(0);
        let out = match opts.source {
            FeatureSource::Adapter => fwd.forward_points(&seqs, &mut unused)?,
            FeatureSource::Pooled => fwd.pooled_points(&seqs, &mut unused)?,
        };
        let value = tape.value(out);
        width = value.last_dim();
        rows.extend(value.data().iter().map(|&v| v as f64));
    }
    Tensor::from_vec(&[clouds.len(), width], rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeLoss {
    /// Multinomial logistic regression.
    Softmax,
    /// One-vs-rest hinge loss.
    Hinge,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub loss: ProbeLoss,
    pub weight_decay: f64,
    pub learning_rate: f64,
    pub iterations: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            loss: ProbeLoss::Softmax,
            weight_decay: 1e-4,
            learning_rate: 0.5,
            iterations: 500,
        }
    }
}

fn scores(z: &[f64], n: usize, r: usize, c: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut s = Vec::with_capacity(n * c);
    for i in 0..n {
        for j in 0..c {
            let mut acc = b[j];
            for k in 0..r {
                acc += z[i * r + k] * w[k * c + j];
            }
            s.push(acc);
        }
    }
    s
}

/// Linear classifier on whitened features.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    mean: Vec<f64>,
    /// `[d, r]`: projection onto the retained principal axes, each scaled
    /// to unit variance.
    whiten: Vec<f64>,
    rank: usize,
    /// `[r, C]`
    weight: Vec<f64>,
    bias: Vec<f64>,
    classes: usize,
}

fn whitening(x: &[f64], n: usize, d: usize) -> (Vec<f64>, Vec<f64>, usize) {
    let mut mean = vec![0.0; d];
    for row in x.chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n as f64);
    }
    let mut cov = nalgebra::DMatrix::<f64>::zeros(d, d);
    for row in x.chunks(d) {
        let c = nalgebra::DVector::from_iterator(d, row.iter().zip(&mean).map(|(v, m)| v - m));
        cov.syger(1.0 / n as f64, &c, &c, 1.0);
    }
    cov.fill_upper_triangle_with_lower_triangle();
    let eig = cov.symmetric_eigen();
    let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..d)
        .filter(|&i| top > 0.0 && eig.eigenvalues[i] > top * 1e-10)
        .collect();
    let r = keep.len();
    let mut w = vec![0.0; d * r];
    for (col, &i) in keep.iter().enumerate() {
        let s = 1.0 / eig.eigenvalues[i].sqrt();
        for row in 0..d {
            w[row * r + col] = eig.eigenvectors[(row, i)] * s;
        }
    }
    (mean, w, r)
}

impl LinearProbe {
    fn transform(&self, x: &[f64], d: usize) -> Vec<f64> {
        let n = x.len() / d;
        let r = self.rank;
        let mut out = vec![0.0; n * r];
        for (i, row) in x.chunks(d).enumerate() {
            for (k, (&v, &m)) in row.iter().zip(&self.mean).enumerate() {
                let c = v - m;
                if c != 0.0 {
                    let wrow = &self.whiten[k * r..(k + 1) * r];
                    out[i * r..(i + 1) * r]
                        .iter_mut()
                        .zip(wrow)
                        .for_each(|(o, w)| *o += c * w);
                }
            }
        }
        out
    }

    fn scores(&self, z: &[f64], n: usize) -> Vec<f64> {
        scores(z, n, self.rank, self.classes, &self.weight, &self.bias)
    }

    /// Fits on `[n, d]` features with labels in `0..classes`.
    pub fn fit(x: &Tensor<f64>, y: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<LinearProbe> {
        if x.ndim() != 2 || x.shape()[0] != y.len() {
            return Err(Error::shape(format!(
                "probe features {:?} do not match {} labels",
                x.shape(),
                y.len()
            )));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
            return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
        }
        let distinct = {
            let mut seen = vec![false; classes];
            y.iter().for_each(|&c| seen[c] = true);
            seen.iter().filter(|&&s| s).count()
        };
        if distinct < 2 {
            return Err(Error::contract("linear probe needs at least two classes in the training split"));
        }
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let (mean, whiten, rank) = whitening(x.data(), n, d);
        let mut probe = LinearProbe {
            mean,
            whiten,
            rank,
            weight: vec![0.0; rank * classes],
            bias: vec![0.0; classes],
            classes,
        };
        let z = probe.transform(x.data(), d);
        let (r, c) = (rank, classes);
        // Nesterov-accelerated full-batch gradient descent from zero
        let mut vel_w = vec![0.0; r * c];
        let mut vel_b = vec![0.0; c];
        let momentum = 0.9;
        for _ in 0..cfg.iterations {
            let look_w: Vec<f64> = probe.weight.iter().zip(&vel_w).map(|(w, v)| w + momentum * v).collect();
            let look_b: Vec<f64> = probe.bias.iter().zip(&vel_b).map(|(b, v)| b + momentum * v).collect();
            let s = scores(&z, n, r, c, &look_w, &look_b);
            let mut gs = vec![0.0; n * c];
            for i in 0..n {
                let row = &s[i * c..(i + 1) * c];
                let g = &mut gs[i * c..(i + 1) * c];
                match cfg.loss {
                    ProbeLoss::Softmax => {
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        for j in 0..c {
                            g[j] = (row[j] - max).exp() / total;
                        }
                        g[y[i]] -= 1.0;
                    }
                    ProbeLoss::Hinge => {
                        for j in 0..c {
                            let t = if j == y[i] { 1.0 } else { -1.0 };
                            if t * row[j] < 1.0 {
                                g[j] = -t;
                            }
                        }
                    }
                }
                g.iter_mut().for_each(|v| *v /= n as f64);
            }
            let mut grad_w = vec![0.0; r * c];
            let mut grad_b = vec![0.0; c];
            for i in 0..n {
                for j in 0..c {
                    let g = gs[i * c + j];
                    grad_b[j] += g;
                    for k in 0..r {
                        grad_w[k * c + j] += z[i * r + k] * g;
                    }
                }
            }
            for (k, gw) in grad_w.iter_mut().enumerate() {
                *gw += cfg.weight_decay * look_w[k];
            }
            for k in 0..r * c {
                vel_w[k] = momentum * vel_w[k] - cfg.learning_rate * grad_w[k];
                probe.weight[k] += vel_w[k];
            }
            for j in 0..c {
                vel_b[j] = momentum * vel_b[j] - cfg.learning_rate * grad_b[j];
                probe.bias[j] += vel_b[j];
            }
        }
        Ok(probe)
    }

    pub fn predict(&self, x: &Tensor<f64>) -> Result<Vec<usize>> {
        let d = self.mean.len();
        if x.ndim() != 2 || x.shape()[1] != d {
            return Err(Error::shape(format!("probe expects [_, {d}] features, got {:?}", x.shape())));
        }
        let s = self.scores(&self.transform(x.data(), d), x.shape()[0]);
        Ok(s.chunks(self.classes)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                    .0
            })
            .collect())
    }
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

/// Trains on the train split's frozen features and returns test accuracy.
pub fn linear_probe(
    train_x: &Tensor<f64>,
    train_y: &[usize],
    test_x: &Tensor<f64>,
    test_y: &[usize],
    cfg: &ProbeConfig,
) -> Result<f64> {
    let classes = train_y.iter().chain(test_y).copied().max().map_or(0, |m| m + 1);
    let probe = LinearProbe::fit(train_x, train_y, classes, cfg)?;
    Ok(accuracy(&probe.predict(test_x)?, test_y))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub runs: usize,
    pub query_per_class: usize,
}

impl Default for FewShotSpec {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 10,
            runs: 10,
            query_per_class: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FewShotReport {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over runs.
    pub std: f64,
}

/// Runs the N-way K-shot protocol on precomputed features.
///
/// Classes are considered in order of first appearance in `labels` and
/// members in dataset order, so the result does not depend on the numeric
/// label ids.
pub fn fewshot_on_features(
    features: &Tensor<f64>,
    labels: &[usize],
    spec: &FewShotSpec,
    probe: &ProbeConfig,
    rng: &RngStream,
) -> Result<FewShotReport> {
    if spec.n_way < 2 || spec.k_shot < 1 || spec.runs < 1 || spec.query_per_class < 1 {
        return Err(Error::param(format!("invalid few-shot spec {spec:?}")));
    }
    if features.ndim() != 2 || features.shape()[0] != labels.len() {
        return Err(Error::shape("few-shot features and labels disagree in length"));
    }
    let mut order: Vec<usize> = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        match order.iter().position(|&c| c == l) {
            Some(p) => members[p].push(i),
            None => {
                order.push(l);
                members.push(vec![i]);
            }
        }
    }
    let need = spec.k_shot + spec.query_per_class;
    let eligible: Vec<usize> = (0..order.len()).filter(|&c| members[c].len() >= need).collect();
    if eligible.len() < spec.n_way {
        return Err(Error::param(format!(
            "{}-way {}-shot with {} queries needs {} classes of ≥ {need} samples; only {} qualify",
            spec.n_way,
            spec.k_shot,
            spec.query_per_class,
            spec.n_way,
            eligible.len()
        )));
    }
    let d = features.shape()[1];
    let gather = |idx: &[usize]| -> Tensor<f64> {
        let mut v = Vec::with_capacity(idx.len() * d);
        idx.iter().for_each(|&i| v.extend_from_slice(features.row(i)));
        Tensor::from_vec(&[idx.len(), d], v).expect("nonempty episode")
    };
    let mut accuracies = Vec::with_capacity(spec.runs);
    for run in 0..spec.runs {
        let mut r = rng.substream(Purpose::FewShot, run as u64);
        let chosen: Vec<usize> = r
            .sample_indices(eligible.len(), spec.n_way)
            .into_iter()
            .map(|i| eligible[i])
            .collect();
        let (mut tr, mut tr_y, mut te, mut te_y) = (vec![], vec![], vec![], vec![]);
        for (local, &c) in chosen.iter().enumerate() {
            let pick = r.sample_indices(members[c].len(), need);
            for (j, &p) in pick.iter().enumerate() {
                if j < spec.k_shot {
                    tr.push(members[c][p]);
                    tr_y.push(local);
                } else {
                    te.push(members[c][p]);
                    te_y.push(local);
                }
            }
        }
        accuracies.push(linear_probe(&gather(&tr), &tr_y, &gather(&te), &te_y, probe)?);
    }
    let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    let std = (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / accuracies.len() as f64).sqrt();
    Ok(FewShotReport { accuracies, mean, std })
}

/// Few-shot evaluation of a model's frozen embeddings.
pub fn fewshot(
    model: &ViPFormer<f32>,
    clouds: &[&Tensor<f32>],
    labels: &[usize],
    spec: &FewShotSpec,
    probe: &ProbeConfig,
    embed: &EmbedOptions,
    rng: &RngStream,
) -> Result<FewShotReport> {
    let features = extract_embeddings(model, clouds, embed)?;
    fewshot_on_features(&features, labels, spec, probe, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n_per: usize, d: usize, sep: f64, seed: u64) -> (Tensor<f64>, Vec<usize>) {
        let mut r = RngStream::new(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for c in 0..2 {
            for _ in 0..n_per {
                for k in 0..d {
                    let center = if k == 0 { sep * c as f64 } else { 0.0 };
                    x.push(center + r.normal());
                }
                y.push(c);
            }
        }
        (Tensor::from_vec(&[2 * n_per, d], x).unwrap(), y)
    }

    #[test]
    fn separable_blobs() {
        let (x, y) = blobs(100, 5, 10.0, 1);
        let (xt, yt) = blobs(100, 5, 10.0, 2);
        let acc = linear_probe(&x, &y, &xt, &yt, &ProbeConfig::default()).unwrap();
        assert!(acc >= 0.99, "{acc}");
        let hinge = ProbeConfig {
            loss: ProbeLoss::Hinge,
            ..Default::default()
        };
        assert!(linear_probe(&x, &y, &xt, &yt, &hinge).unwrap() >= 0.99);
    }

    #[test]
    fn single_class_is_rejected() {
        let (x, _) = blobs(4, 3, 1.0, 0);
        let y = vec![0; 8];
        assert!(matches!(
            linear_probe(&x, &y, &x, &y, &ProbeConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn infeasible_fewshot_is_a_parameter_error() {
        let (x, y) = blobs(5, 3, 1.0, 0);
        let spec = FewShotSpec {
            n_way: 2,
            k_shot: 3,
            runs: 1,
            query_per_class: 3,
        };
        assert!(matches!(
            fewshot_on_features(&x, &y, &spec, &ProbeConfig::default(), &RngStream::new(0)),
            Err(Error::Parameter(_))
        ));
    }
}
