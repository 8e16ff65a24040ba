//! Oracle, gradient and invariant checks runnable from a release build.
//!
//! Each function returns one [`Check`] per property so callers can print a
//! pass/fail line for every item.

use crate::autodiff::{Tape, Var};
use crate::contrast::{cmc_loss, combined_loss, imc_loss, ContrastConfig, ContrastMode};
use crate::error::Result;
use crate::gradcheck::grad_check_many;
use crate::model::{count_parameters, Forward, GradMode, ParamKind, ViPFormer, ViPFormerConfig};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::tokenize::{build_point_patches_from, farthest_point_sample_from, knn_group, PointPatchSequence};
use crate::train::SchedulerState;
use crate::verify;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    fn from_result(name: impl Into<String>, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((ok, detail)) => Check::new(name, ok, detail),
            Err(e) => Check::new(name, false, format!("error: {e}")),
        }
    }
}

fn random(rng: &mut RngStream, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.uniform_in(lo, hi)).collect()).expect("shape matches")
}

/// Parameter counts of the two architecture presets against the reported
/// 5.1M and 16.7M, within 5%.
pub fn parameter_counts() -> Vec<Check> {
    [("tableI", ViPFormerConfig::table_i(), 5.1e6), ("tableII", ViPFormerConfig::table_ii(), 16.7e6)]
        .into_iter()
        .map(|(name, cfg, target)| {
            let n = count_parameters(&cfg) as f64;
            let rel = (n - target).abs() / target;
            Check::new(
                format!("{name} parameter count within 5% of {:.1}M", target / 1e6),
                rel <= 0.05,
                format!("{n} parameters ({:+.2}%)", 100.0 * (n - target) / target),
            )
        })
        .collect()
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Both contrastive losses against the direct ratio-of-exponentials
/// evaluation over `cases` random batches, plus the two degenerate cases.
pub fn contrastive_oracle(cases: usize, seed: u64) -> Vec<Check> {
    let mut rng = RngStream::new(seed);
    let mut worst = 0f64;
    let mut run = || -> Result<f64> {
        for _ in 0..cases {
            let n = 1 + rng.below(8);
            let d = 1 + rng.below(6);
            let tau = rng.uniform_in(0.1, 1.5);
            let a = random(&mut rng, &[n, d], -2.0, 2.0);
            let b = random(&mut rng, &[n, d], -2.0, 2.0);
            let reference = verify::nt_xent_direct(&rows(&a), &rows(&b), tau);
            for got in [imc_loss(&a, &b, tau)?, cmc_loss(&a, &b, tau)?] {
                worst = worst.max((got - reference).abs() / reference.abs().max(1.0));
            }
        }
        Ok(worst)
    };
    let oracle = Check::from_result(
        format!("IMC/CMC match direct evaluation over {cases} cases (N in 1..=8) to 1e-8"),
        run().map(|w| (w < 1e-8, format!("max relative error {w:.3e}"))),
    );

    let degenerate = (|| -> Result<(bool, String)> {
        let mut worst = 0f64;
        for n in 1..=8 {
            let row: Vec<f64> = vec![0.3, -1.2, 0.7, 2.0];
            let data: Vec<f64> = (0..n).flat_map(|_| row.clone()).collect();
            let t = Tensor::from_vec(&[n, 4], data)?;
            let expect = ((2 * n - 1) as f64).ln();
            for got in [imc_loss(&t, &t, 0.07)?, cmc_loss(&t, &t, 0.5)?] {
                worst = worst.max((got - expect).abs());
            }
        }
        Ok((worst <= 1e-9, format!("max |L - log(2N-1)| = {worst:.3e}")))
    })();
    let single = (|| -> Result<(bool, String)> {
        let mut rng = RngStream::new(seed ^ 1);
        let mut all_zero = true;
        for _ in 0..50 {
            let a = random(&mut rng, &[1, 5], -1.0, 1.0);
            let b = random(&mut rng, &[1, 5], -1.0, 1.0);
            all_zero &= imc_loss(&a, &b, 0.2)? == 0.0 && cmc_loss(&a, &b, 0.2)? == 0.0;
        }
        Ok((all_zero, "50 random single-pair batches".into()))
    })();
    vec![
        oracle,
        Check::from_result("identical rows give log(2N-1) within 1e-9", degenerate),
        Check::from_result("N = 1 gives exactly 0", single),
    ]
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output coordinate carries a
/// distinct weight into the checked scalar.
fn weighted(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let r = random(&mut RngStream::new(seed), &shape, -1.0, 1.0);
    let r = tape.constant(r);
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}

const TOL: f64 = 1e-4;
const H: f64 = 1e-5;

fn op_check<F>(name: &str, inputs: Vec<Tensor<f64>>, f: F) -> Check
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let r = grad_check_many(
        |tape, vars| {
            let out = f(tape, vars)?;
            if tape.shape(out).is_empty() {
                Ok(out)
            } else {
                weighted(tape, out, 99)
            }
        },
        &inputs,
        H,
    );
    Check::from_result(
        format!("gradient of {name}"),
        r.map(|r| {
            (
                r.max_relative_error < TOL,
                format!(
                    "max relative error {:.2e} (input {}, coordinate {})",
                    r.max_relative_error, r.input, r.coordinate
                ),
            )
        }),
    )
}

/// Finite-difference check of a model-level scalar with respect to every
/// learnable tensor (all coordinates of small tensors, a stride otherwise).
pub fn model_grad_check<F>(model: &ViPFormer<f64>, f: F) -> Result<(f64, String)>
where
    F: Fn(&mut Forward<'_, f64>) -> Result<Var>,
{
    let eval = |m: &ViPFormer<f64>, grad: GradMode| -> Result<(f64, Option<std::collections::HashMap<String, Vec<f64>>>)> {
        let mut tape = Tape::new();
        let mut fwd = m.bind(&mut tape, true, grad);
        let out = f(&mut fwd)?;
        let out = if fwd.tape.shape(out).is_empty() {
            out
        } else {
            weighted(fwd.tape, out, 7)?
        };
        let value = fwd.tape.value(out).data()[0];
        if grad == GradMode::None {
            return Ok((value, None));
        }
        fwd.tape.backward(out)?;
        Ok((value, Some(fwd.grads())))
    };
    let (_, grads) = eval(model, GradMode::All)?;
    let grads = grads.expect("requested");
    let mut probe = model.clone();
    let mut worst = (0f64, String::from("no parameters"));
    let names: Vec<String> = model
        .weights
        .iter()
        .filter(|p| p.kind == ParamKind::Learnable)
        .map(|p| p.name.clone())
        .collect();
    for name in names {
        let numel = model.weights.get(&name).expect("listed").numel();
        let zeros = vec![0.0; numel];
        let g = grads.get(&name).unwrap_or(&zeros);
        let stride = if numel <= 64 { 1 } else { numel / 24 };
        for j in (0..numel).step_by(stride) {
            let orig = model.weights.get(&name).expect("listed").data()[j];
            let mut at = |v: f64| -> Result<f64> {
                probe.weights.get_mut(&name).expect("listed").data_mut()[j] = v;
                Ok(eval(&probe, GradMode::None)?.0)
            };
            let plus = at(orig + H)?;
            let minus = at(orig - H)?;
            at(orig)?;
            let numeric = (plus - minus) / (2.0 * H);
            let err = (g[j] - numeric).abs() / g[j].abs().max(1.0);
            if err > worst.0 || !err.is_finite() {
                worst = (
                    if err.is_finite() { err } else { f64::INFINITY },
                    format!("{name}[{j}]: analytic {:.6e}, numeric {numeric:.6e}", g[j]),
                );
            }
        }
    }
    Ok(worst)
}

/// Configuration for the single-block check: D = 8, two heads.
pub fn block_config() -> ViPFormerConfig {
    ViPFormerConfig {
        layers: 1,
        heads: 2,
        dim: 8,
        mlp_ratio: 2,
        length: 4,
        neighbors: 3,
        patch: 4,
        image_height: 8,
        image_width: 8,
        image_channels: 3,
        point_channels: 3,
        point_hidden: 6,
        dropout: 0.0,
        out_dim: 5,
    }
}

/// Perturbs every learnable tensor away from its initial value so that
/// zero-initialised biases and unit norm gains are exercised too.
pub fn jitter_weights(model: &mut ViPFormer<f64>, seed: u64, amount: f64) {
    let mut rng = RngStream::new(seed);
    let names: Vec<String> = model
        .weights
        .iter()
        .filter(|p| p.kind == ParamKind::Learnable)
        .map(|p| p.name.clone())
        .collect();
    for name in names {
        for v in model.weights.get_mut(&name).expect("listed").data_mut() {
            *v += rng.uniform_in(-amount, amount);
        }
    }
}

/// Analytic against central-difference gradients for every differentiable
/// operation, one full encoder block and the combined objective.
pub fn gradients(seed: u64) -> Vec<Check> {
    let mut rng = RngStream::new(seed);
    let mut r = |shape: &[usize]| random(&mut rng, shape, -1.5, 1.5);
    let mut out = vec![
        op_check("matmul (broadcast batch)", vec![r(&[2, 3, 4]), r(&[4, 5])], |t, v| t.matmul(v[0], v[1])),
        op_check("linear", vec![r(&[2, 3, 4]), r(&[4, 5]), r(&[5])], |t, v| t.linear(v[0], v[1], Some(v[2]))),
        op_check("add (broadcast)", vec![r(&[2, 3, 4]), r(&[4])], |t, v| t.add(v[0], v[1])),
        op_check("mul", vec![r(&[3, 4]), r(&[3, 4])], |t, v| t.mul(v[0], v[1])),
        op_check("scale", vec![r(&[3, 4])], |t, v| Ok(t.scale(v[0], 0.37))),
        op_check("sum", vec![r(&[3, 4])], |t, v| Ok(t.sum(v[0]))),
        op_check("mean", vec![r(&[3, 4])], |t, v| Ok(t.mean(v[0]))),
        op_check("relu", vec![r(&[4, 5])], |t, v| Ok(t.relu(v[0]))),
        op_check("gelu", vec![r(&[4, 5])], |t, v| Ok(t.gelu(v[0]))),
        op_check("softmax", vec![r(&[3, 5])], |t, v| t.softmax(v[0])),
        op_check("layer norm", vec![r(&[2, 3, 6]), r(&[6]), r(&[6])], |t, v| {
            t.layer_norm(v[0], v[1], v[2], 1e-5)
        }),
        op_check("batch norm (batch statistics)", vec![r(&[6, 4]), r(&[4]), r(&[4])], |t, v| {
            Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0)
        }),
        op_check("batch norm (running statistics)", vec![r(&[6, 4]), r(&[4]), r(&[4])], |t, v| {
            t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3, 0.0], &[0.5, 1.5, 2.0, 0.8], 1e-5)
        }),
        op_check("dropout (fixed mask)", vec![r(&[4, 6])], |t, v| {
            t.dropout(v[0], 0.3, &mut RngStream::new(5))
        }),
        op_check("multi-head attention", vec![r(&[2, 4, 12])], |t, v| t.attention(v[0], 2)),
        op_check("max+mean pool", vec![r(&[2, 5, 3])], |t, v| t.pool_max_mean(v[0])),
        op_check("reshape", vec![r(&[2, 6])], |t, v| t.reshape(v[0], &[3, 4])),
    ];
    for mode in [ContrastMode::ImcOnly, ContrastMode::CmcOnly, ContrastMode::Both] {
        let cfg = ContrastConfig {
            tau: 0.3,
            alpha: 0.6,
            mode,
            ..Default::default()
        };
        out.push(op_check(
            &format!("combined objective ({mode} features)"),
            vec![r(&[5, 4]), r(&[5, 4]), r(&[5, 4])],
            move |t, v| Ok(combined_loss(t, v[0], Some(v[1]), Some(v[2]), None, &cfg)?.0),
        ));
    }

    let block = (|| -> Result<Check> {
        let mut model = ViPFormer::<f64>::new(block_config(), &RngStream::new(seed))?;
        jitter_weights(&mut model, seed + 1, 0.3);
        let z = random(&mut RngStream::new(seed + 2), &[1, 4, 8], -1.0, 1.0);
        let input = op_check("encoder block input", vec![z.clone()], |t, v| {
            let mut fwd = model.bind(t, true, GradMode::None);
            fwd.encoder_block(v[0], 0, &mut RngStream::new(0))
        });
        let weights = model_grad_check(&model, |fwd| {
            let zv = fwd.tape.constant(z.clone());
            fwd.encoder_block(zv, 0, &mut RngStream::new(0))
        })?;
        let worst = input.detail.clone();
        Ok(Check::new(
            "gradient of one encoder block (input and all weights)",
            input.passed && weights.0 < TOL,
            format!("input: {worst}; weights: max relative error {:.2e} at {}", weights.0, weights.1),
        ))
    })();
    out.push(block.unwrap_or_else(|e| Check::new("gradient of one encoder block", false, format!("error: {e}"))));

    let full = (|| -> Result<(bool, String)> {
        let mut model = ViPFormer::<f64>::new(block_config(), &RngStream::new(seed + 3))?;
        jitter_weights(&mut model, seed + 4, 0.1);
        let (points, images) = small_batch(&model, 4, seed + 5)?;
        let cfg = ContrastConfig {
            tau: 0.5,
            alpha: 0.7,
            ..Default::default()
        };
        let (err, at) = model_grad_check(&model, |fwd| {
            let mut rng = RngStream::new(0);
            let p1 = fwd.forward_points(&points.0, &mut rng)?;
            let p2 = fwd.forward_points(&points.1, &mut rng)?;
            let f = fwd.forward_image(&images, &mut rng)?;
            Ok(combined_loss(&mut *fwd.tape, p1, Some(p2), Some(f), None, &cfg)?.0)
        })?;
        Ok((err < TOL, format!("max relative error {err:.2e} at {at}")))
    })();
    out.push(Check::from_result("gradient of the full model under the combined objective", full));
    out
}

type Views = (Vec<PointPatchSequence<f64>>, Vec<PointPatchSequence<f64>>);

fn small_batch(
    model: &ViPFormer<f64>,
    n: usize,
    seed: u64,
) -> Result<(Views, Vec<crate::tokenize::ImagePatchSequence<f64>>)> {
    let mut rng = RngStream::new(seed);
    let c = &model.config;
    let mut v1 = Vec::new();
    let mut v2 = Vec::new();
    let mut img = Vec::new();
    for _ in 0..n {
        let cloud = random(&mut rng, &[24, 3], -1.0, 1.0);
        v1.push(model.tokenize_points(&cloud, &mut rng)?);
        let other = random(&mut rng, &[24, 3], -1.0, 1.0);
        v2.push(model.tokenize_points(&other, &mut rng)?);
        let image = random(&mut rng, &[c.image_height, c.image_width, c.image_channels], 0.0, 1.0);
        img.push(model.tokenize_image(&image)?);
    }
    Ok(((v1, v2), img))
}

/// Single-block forward against the step-by-step reference to 1e-10.
pub fn encoder_block_equivalence(seed: u64) -> Check {
    let r = (|| -> Result<(bool, String)> {
        let cfg = ViPFormerConfig {
            layers: 1,
            heads: 2,
            dim: 8,
            ..block_config()
        };
        let mut model = ViPFormer::<f64>::new(cfg, &RngStream::new(seed))?;
        jitter_weights(&mut model, seed + 1, 0.5);
        let z = random(&mut RngStream::new(seed + 2), &[1, 3, 8], -1.0, 1.0);
        let mut tape = Tape::new();
        let mut fwd = model.bind(&mut tape, false, GradMode::None);
        let zv = fwd.tape.constant(z.clone());
        let out = fwd.encoder_block(zv, 0, &mut RngStream::new(0))?;
        let got = tape.value(out).data().to_vec();
        let reference: Vec<f64> = verify::encoder_block_reference(&model.weights, 0, 2, &rows(&z.clone().reshape(&[3, 8])?))
            .into_iter()
            .flatten()
            .collect();
        let diff = got.iter().zip(&reference).fold(0f64, |a, (x, y)| a.max((x - y).abs()));
        Ok((diff < 1e-10, format!("max abs difference {diff:.2e}")))
    })();
    Check::from_result("encoder block matches the step-by-step reference to 1e-10", r)
}

/// FPS against brute-force max-min selection and kNN against a full stable
/// sort, on random clouds and on integer grids full of distance ties.
pub fn fps_knn(clouds: usize, seed: u64) -> Vec<Check> {
    let mut rng = RngStream::new(seed);
    let mut fps_bad = Vec::new();
    let mut knn_bad = Vec::new();
    let mut ties = 0usize;
    for case in 0..clouds {
        let n = 1 + rng.below(64);
        let grid = case % 2 == 1;
        let data: Vec<f64> = (0..n * 3)
            .map(|_| {
                if grid {
                    rng.below(3) as f64
                } else {
                    rng.uniform_in(-1.0, 1.0)
                }
            })
            .collect();
        let points = Tensor::from_vec(&[n, 3], data).expect("shape");
        let rows = rows(&points);
        let g = 1 + rng.below(n);
        let k = 1 + rng.below(n);
        let first = rng.below(n);
        let fps = farthest_point_sample_from(&points, g, first);
        let oracle = verify::fps_brute_force(&rows, g, first);
        if fps.as_ref().ok() != Some(&oracle) {
            fps_bad.push(case);
        }
        let centers: Vec<f64> = oracle.iter().flat_map(|&i| rows[i].clone()).collect();
        let centers = Tensor::from_vec(&[g, 3], centers).expect("shape");
        let groups = knn_group(&points, &centers, k);
        let expect: Vec<Vec<usize>> = oracle.iter().map(|&i| verify::knn_full_sort(&rows, &rows[i], k)).collect();
        if groups.as_ref().ok() != Some(&expect) {
            knn_bad.push(case);
        }
        if grid {
            ties += 1;
        }
    }
    vec![
        Check::new(
            format!("FPS equals brute-force max-min selection on {clouds} clouds (N <= 64)"),
            fps_bad.is_empty(),
            format!("{} mismatches, {ties} tie-heavy grid clouds", fps_bad.len()),
        ),
        Check::new(
            format!("kNN equals full-sort neighbours on {clouds} clouds, ties to lowest index"),
            knn_bad.is_empty(),
            format!("{} mismatches", knn_bad.len()),
        ),
    ]
}

/// The three schedule values to 1e-12.
pub fn scheduler() -> Vec<Check> {
    let s = SchedulerState::default();
    [(5.0, 0.001), (105.0, 0.0006), (52.5, 0.0005)]
        .into_iter()
        .map(|(epoch, expect)| {
            let got = s.lr_at(epoch);
            Check::new(
                format!("lr_at({epoch}) = {expect}"),
                (got - expect).abs() <= 1e-12,
                format!("got {got:e}"),
            )
        })
        .collect()
}

/// Attention normalisation, permutation invariance, weight sharing and
/// constant pooling.
pub fn architecture(seed: u64) -> Vec<Check> {
    let cfg = ViPFormerConfig {
        layers: 2,
        heads: 2,
        dim: 16,
        length: 8,
        neighbors: 4,
        out_dim: 8,
        ..block_config()
    };
    let mut out = Vec::new();
    let setup = || -> Result<ViPFormer<f64>> {
        let mut m = ViPFormer::<f64>::new(cfg.clone(), &RngStream::new(seed))?;
        jitter_weights(&mut m, seed + 1, 0.2);
        Ok(m)
    };

    out.push(Check::from_result(
        "attention rows sum to 1 within 1e-6",
        (|| {
            let model = setup()?;
            let ((v1, _), img) = small_batch(&model, 3, seed + 2)?;
            let mut tape = Tape::new();
            let mut fwd = model.bind(&mut tape, true, GradMode::None);
            let mut rng = RngStream::new(0);
            fwd.forward_points(&v1, &mut rng)?;
            fwd.forward_image(&img, &mut rng)?;
            let mut worst = 0f64;
            let mut rows_seen = 0;
            for map in tape.attention_maps() {
                for row in map.probs.chunks(map.tokens) {
                    let s: f64 = row.iter().sum();
                    worst = worst.max((s - 1.0).abs());
                    rows_seen += 1;
                }
            }
            Ok((rows_seen > 0 && worst <= 1e-6, format!("{rows_seen} rows, max |sum - 1| = {worst:.2e}")))
        })(),
    ));

    out.push(Check::from_result(
        "point features invariant to input point order (same FPS start point)",
        (|| {
            let model = setup()?;
            let mut rng = RngStream::new(seed + 3);
            let n = 40;
            let cloud = random(&mut rng, &[n, 3], -1.0, 1.0);
            let mut perm: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut perm);
            let permuted: Vec<f64> = perm.iter().flat_map(|&i| cloud.row(i).to_vec()).collect();
            let permuted = Tensor::from_vec(&[n, 3], permuted)?;
            let first = 5;
            let first_perm = perm.iter().position(|&i| i == first).expect("permutation");
            let a = build_point_patches_from(&cloud, cfg.length, cfg.neighbors, first)?;
            let b = build_point_patches_from(&permuted, cfg.length, cfg.neighbors, first_perm)?;
            let features = |seq: PointPatchSequence<f64>| -> Result<Vec<f64>> {
                let mut tape = Tape::new();
                let mut fwd = model.bind(&mut tape, true, GradMode::None);
                let p = fwd.pooled_points(&[seq], &mut RngStream::new(0))?;
                Ok(tape.value(p).data().to_vec())
            };
            let (fa, fb) = (features(a)?, features(b)?);
            let diff = fa.iter().zip(&fb).fold(0f64, |m, (x, y)| m.max((x - y).abs()));
            Ok((diff <= 1e-12, format!("max abs difference {diff:.2e}")))
        })(),
    ));

    out.push(Check::from_result(
        "encoder weights shared by both branches (mutation probing)",
        (|| {
            let base = setup()?;
            let ((v1, _), img) = small_batch(&base, 2, seed + 4)?;
            let run = |m: &ViPFormer<f64>| -> Result<(Vec<f64>, Vec<f64>)> {
                let mut tape = Tape::new();
                let mut fwd = m.bind(&mut tape, true, GradMode::None);
                let mut rng = RngStream::new(0);
                let p = fwd.pooled_points(&v1, &mut rng)?;
                let f = fwd.pooled_image(&img, &mut rng)?;
                Ok((tape.value(p).data().to_vec(), tape.value(f).data().to_vec()))
            };
            let (p0, f0) = run(&base)?;
            let mut report = Vec::new();
            let mut ok = true;
            let encoder_names: Vec<String> = base
                .weights
                .iter()
                .filter(|p| p.kind == ParamKind::Learnable && p.name.starts_with("encoder."))
                .map(|p| p.name.clone())
                .collect();
            let probes = encoder_names
                .iter()
                .map(|n| (n.clone(), true, true))
                .chain([
                    ("point_adapter.fc1.weight".to_string(), true, false),
                    ("image_adapter.weight".to_string(), false, true),
                ]);
            for (name, point_moves, image_moves) in probes {
                let mut m = base.clone();
                for v in m.weights.get_mut(&name).expect("exists").data_mut() {
                    *v += 0.25;
                }
                let (p, f) = run(&m)?;
                let (dp, df) = (p != p0, f != f0);
                if (dp, df) != (point_moves, image_moves) {
                    ok = false;
                    report.push(format!("{name}: point changed {dp}, image changed {df}"));
                }
            }
            let separate = base
                .weights
                .iter()
                .any(|p| p.name.contains("encoder") && !p.name.starts_with("encoder."));
            ok &= !separate;
            Ok((
                ok,
                if report.is_empty() {
                    format!("{} encoder tensors each move both branches; adapters move one", encoder_names.len())
                } else {
                    report.join("; ")
                },
            ))
        })(),
    ));

    out.push(Check::from_result(
        "pool of a constant sequence is exactly [c; c]",
        (|| {
            let mut rng = RngStream::new(seed + 5);
            let mut exact = true;
            for t in [1usize, 3, 7, 128] {
                let c: Vec<f64> = (0..5).map(|_| rng.uniform_in(-3.0, 3.0)).collect();
                let data: Vec<f64> = (0..t).flat_map(|_| c.clone()).collect();
                let mut tape = Tape::new();
                let x = tape.constant(Tensor::from_vec(&[1, t, 5], data)?);
                let p = tape.pool_max_mean(x)?;
                let want: Vec<f64> = c.iter().chain(&c).copied().collect();
                exact &= tape.value(p).data() == want.as_slice();
            }
            Ok((exact, "T in {1, 3, 7, 128}".into()))
        })(),
    ));
    out
}

/// Every fast check, as run by the `selftest` command.
pub fn run_all(seed: u64) -> Vec<Check> {
    let mut all = parameter_counts();
    all.extend(contrastive_oracle(1000, seed));
    all.extend(gradients(seed));
    all.push(encoder_block_equivalence(seed));
    all.extend(fps_knn(200, seed));
    all.extend(scheduler());
    all.extend(architecture(seed));
    all
}
