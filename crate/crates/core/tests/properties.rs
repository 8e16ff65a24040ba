use proptest::prelude::*;

use vipformer::augment::{apply_augmentation, AugmentationSpec, RotationAxis};
use vipformer::contrast::{cmc_loss, imc_loss};
use vipformer::data::{batch_indices, normalize_points, BatchMode};
use vipformer::eval::{fewshot_on_features, linear_probe, FewShotSpec, ProbeConfig};
use vipformer::model::{count_parameters, ViPFormer, ViPFormerConfig};
use vipformer::tokenize::{build_point_patches_from, knn_group, patchify_image, unpatchify_image};
use vipformer::train::{adamw_step, AdamWConfig, AdamWState, SchedulerState};
use vipformer::verify::{fps_brute_force, nt_xent_direct, AdamReference};
use vipformer::{model::ParamKind, model::ParamStore, RngStream, Tape, Tensor};

fn rows(t: &[f64], d: usize) -> Vec<Vec<f64>> {
    t.chunks(d).map(<[f64]>::to_vec).collect()
}

fn random_matrix(n: usize, d: usize, seed: u64) -> Tensor<f64> {
    let mut r = RngStream::new(seed);
    Tensor::from_vec(&[n, d], (0..n * d).map(|_| r.normal()).collect()).unwrap()
}

fn cloud(n: usize, seed: u64) -> Tensor<f64> {
    let mut r = RngStream::new(seed);
    Tensor::from_vec(&[n, 3], (0..n * 3).map(|_| r.uniform_in(-1.0, 1.0)).collect()).unwrap()
}

fn pairwise(t: &Tensor<f64>) -> Vec<f64> {
    let n = t.rows();
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let (a, b) = (t.row(i), t.row(j));
            out.push(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt());
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn contrastive_losses_ignore_row_scale(n in 1usize..8, d in 2usize..6, seed: u64, row in 0usize..8, c in 0.01f64..100.0, tau in 0.05f64..1.0) {
        let a = random_matrix(n, d, seed);
        let b = random_matrix(n, d, seed ^ 1);
        let mut scaled = a.clone();
        let r = row % n;
        scaled.data_mut()[r * d..(r + 1) * d].iter_mut().for_each(|v| *v *= c);
        prop_assert!((imc_loss(&a, &b, tau).unwrap() - imc_loss(&scaled, &b, tau).unwrap()).abs() < 1e-6);
        let mut scaled_b = b.clone();
        scaled_b.data_mut()[r * d..(r + 1) * d].iter_mut().for_each(|v| *v *= c);
        prop_assert!((cmc_loss(&a, &b, tau).unwrap() - cmc_loss(&a, &scaled_b, tau).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn contrastive_losses_ignore_joint_row_permutation(n in 1usize..8, d in 2usize..6, seed: u64, tau in 0.05f64..1.0) {
        let a = random_matrix(n, d, seed);
        let b = random_matrix(n, d, seed ^ 2);
        let mut perm: Vec<usize> = (0..n).collect();
        RngStream::new(seed ^ 3).shuffle(&mut perm);
        let permute = |t: &Tensor<f64>| {
            let v: Vec<f64> = perm.iter().flat_map(|&i| t.row(i).to_vec()).collect();
            Tensor::from_vec(&[n, d], v).unwrap()
        };
        let (pa, pb) = (permute(&a), permute(&b));
        prop_assert!((imc_loss(&a, &b, tau).unwrap() - imc_loss(&pa, &pb, tau).unwrap()).abs() < 1e-10);
        prop_assert!((cmc_loss(&a, &b, tau).unwrap() - cmc_loss(&pa, &pb, tau).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn contrastive_losses_match_direct_evaluation(n in 1usize..=8, d in 2usize..6, seed: u64, tau in 0.05f64..1.0) {
        let a = random_matrix(n, d, seed);
        let b = random_matrix(n, d, seed ^ 4);
        let direct = nt_xent_direct(&rows(a.data(), d), &rows(b.data(), d), tau);
        prop_assert!((imc_loss(&a, &b, tau).unwrap() - direct).abs() < 1e-8);
        prop_assert!((cmc_loss(&a, &b, tau).unwrap() - direct).abs() < 1e-8);
    }

    #[test]
    fn softmax_rows_sum_to_one(r in 1usize..5, c in 1usize..9, seed: u64, spread in 0.1f64..50.0) {
        let x = random_matrix(r, c, seed).map(|v| v * spread);
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(x);
        let s = tape.softmax(v).unwrap();
        for row in tape.value(s).data().chunks(c) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn layer_norm_standardises_tokens(r in 1usize..5, d in 2usize..12, seed: u64, shift in -10.0f64..10.0) {
        let x = random_matrix(r, d, seed).map(|v| v + shift);
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x);
        let g = tape.constant(Tensor::full(&[d], 1.0));
        let b = tape.constant(Tensor::zeros(&[d]));
        let y = tape.layer_norm(xv, g, b, 1e-12).unwrap();
        for row in tape.value(y).data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn dropout_is_reproducible_from_its_stream(seed: u64, rate in 0.0f64..0.9) {
        let x = random_matrix(4, 6, seed);
        let run = || {
            let mut tape = Tape::<f64>::new();
            let v = tape.constant(x.clone());
            let y = tape.dropout(v, rate, &mut RngStream::new(seed)).unwrap();
            tape.value(y).clone()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn patch_content_is_translation_invariant(seed: u64, n in 8usize..48, t in prop::array::uniform3(-64i32..64)) {
        // Coordinates and offsets on a 1/64 grid keep every sum exact.
        let mut r = RngStream::new(seed);
        let pts: Vec<f64> = (0..n * 3).map(|_| (r.below(129) as f64 - 64.0) / 64.0).collect();
        let p = Tensor::from_vec(&[n, 3], pts.clone()).unwrap();
        let off = t.map(|v| v as f64 / 64.0);
        let shifted: Vec<f64> = pts.iter().enumerate().map(|(i, v)| v + off[i % 3]).collect();
        let q = Tensor::from_vec(&[n, 3], shifted).unwrap();
        let (g, k, first) = (n / 4 + 1, n / 3 + 1, r.below(n));
        let a = build_point_patches_from(&p, g, k, first).unwrap();
        let b = build_point_patches_from(&q, g, k, first).unwrap();
        prop_assert_eq!(&a.patches, &b.patches);
        for (ca, cb) in a.centers.data().chunks(3).zip(b.centers.data().chunks(3)) {
            for c in 0..3 {
                prop_assert_eq!(ca[c] + off[c], cb[c]);
            }
        }
    }

    #[test]
    fn fps_matches_brute_force(seed: u64, n in 1usize..=64, gfrac in 0.0f64..1.0) {
        let p = cloud(n, seed);
        let g = 1 + ((n - 1) as f64 * gfrac) as usize;
        let first = RngStream::new(seed ^ 5).below(n);
        let fast = vipformer::tokenize::farthest_point_sample_from(&p, g, first).unwrap();
        prop_assert_eq!(fast, fps_brute_force(&rows(p.data(), 3), g, first));
    }

    #[test]
    fn knn_is_stable_under_point_permutation(seed: u64, n in 2usize..40, kfrac in 0.0f64..1.0) {
        let p = cloud(n, seed);
        let k = 1 + ((n - 1) as f64 * kfrac) as usize;
        let centers = Tensor::from_vec(&[2, 3], [p.row(0), p.row(n - 1)].concat()).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        RngStream::new(seed ^ 6).shuffle(&mut perm);
        let permuted = Tensor::from_vec(&[n, 3], perm.iter().flat_map(|&i| p.row(i).to_vec()).collect()).unwrap();
        let a = knn_group(&p, &centers, k).unwrap();
        let b = knn_group(&permuted, &centers, k).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            let mut sa = ra.clone();
            let mut sb: Vec<usize> = rb.iter().map(|&j| perm[j]).collect();
            sa.sort_unstable();
            sb.sort_unstable();
            prop_assert_eq!(sa, sb);
        }
    }

    #[test]
    fn patchify_round_trips(seed: u64, gh in 1usize..5, gw in 1usize..5, q in 1usize..5, c in 1usize..4) {
        let img = random_matrix(gh * q * gw * q, c, seed).reshape(&[gh * q, gw * q, c]).unwrap();
        let seq = patchify_image(&img, q).unwrap();
        prop_assert_eq!(seq.len(), gh * gw);
        prop_assert_eq!(unpatchify_image(&seq).unwrap(), img);
    }

    #[test]
    fn augmentation_is_deterministic_and_bounded(seed: u64, n in 1usize..64, clip in 0.0f64..0.1, sigma in 0.0f64..0.2) {
        let p = cloud(n, seed);
        let spec = AugmentationSpec {
            jitter_sigma: sigma,
            jitter_clip: clip,
            scale_range: (1.0, 1.0),
            rotation_range: (0.0, 0.0),
            translation_range: (0.0, 0.0),
            ..AugmentationSpec::default()
        };
        let rng = RngStream::new(seed ^ 7);
        let a = apply_augmentation(&p, &spec, &rng).unwrap();
        prop_assert_eq!(&a, &apply_augmentation(&p, &spec, &rng).unwrap());
        for (x, y) in a.data().iter().zip(p.data()) {
            prop_assert!((x - y).abs() <= clip + 1e-15);
        }
    }

    #[test]
    fn rotation_and_translation_are_isometries(seed: u64, n in 2usize..40, arbitrary: bool) {
        let p = cloud(n, seed);
        let spec = AugmentationSpec {
            rotation_axis: if arbitrary { RotationAxis::Arbitrary } else { RotationAxis::Up },
            scale_range: (1.0, 1.0),
            jitter_sigma: 0.0,
            ..AugmentationSpec::default()
        };
        let a = apply_augmentation(&p, &spec, &RngStream::new(seed ^ 8)).unwrap();
        for (x, y) in pairwise(&a).iter().zip(pairwise(&p)) {
            prop_assert!((x - y).abs() <= 1e-5 * y.max(1e-3));
        }
    }

    #[test]
    fn schedule_warmup_is_linear_and_peaks_exactly(peak in 1e-5f64..1e-2, decay in 0.1f64..=1.0, cycle in 10.0f64..200.0, wfrac in 0.01f64..0.5, cyc in 0u32..4, u in 0.0f64..1.0) {
        let s = SchedulerState { base_peak: peak, peak_decay: decay, cycle_len: cycle, warmup_len: cycle * wfrac, per_step: true };
        let start = cyc as f64 * cycle;
        let cycle_peak = peak * decay.powi(cyc as i32);
        prop_assert!((s.lr_at(start + s.warmup_len) - cycle_peak).abs() <= 1e-12 * cycle_peak.max(1.0));
        let t = u * s.warmup_len;
        prop_assert!((s.lr_at(start + t) - cycle_peak * t / s.warmup_len).abs() <= 1e-12);
        // Cosine phase decreases towards zero at the cycle's end.
        let late = start + cycle * (1.0 - 1e-9);
        prop_assert!(s.lr_at(late) < 1e-9 * cycle_peak + 1e-15);
        let (a, b) = (start + s.warmup_len + u * (cycle - s.warmup_len) * 0.5, start + s.warmup_len + (0.5 + 0.5 * u) * (cycle - s.warmup_len));
        prop_assert!(s.lr_at(a) >= s.lr_at(b) - 1e-15);
    }

    #[test]
    fn batches_partition_the_kept_samples(n in 1usize..200, b in 1usize..40, seed: u64) {
        let eval = batch_indices(n, b, BatchMode::Eval, None).unwrap();
        let mut all: Vec<usize> = eval.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        if n >= b {
            let train = batch_indices(n, b, BatchMode::Pretrain, Some(&mut RngStream::new(seed))).unwrap();
            prop_assert_eq!(train.len(), n / b);
            prop_assert!(train.iter().all(|x| x.len() == b));
            let mut seen: Vec<usize> = train.concat();
            seen.sort_unstable();
            seen.dedup();
            prop_assert_eq!(seen.len(), (n / b) * b);
        }
    }

    #[test]
    fn normalisation_is_idempotent(seed: u64, n in 2usize..64, scale in 0.01f64..100.0) {
        let mut r = RngStream::new(seed);
        let pts: Vec<[f64; 3]> = (0..n).map(|_| [r.normal() * scale + 3.0, r.normal() * scale, r.normal() * scale - 1.0]).collect();
        let (once, _, _) = normalize_points(&pts);
        let (twice, centroid, s) = normalize_points(&once);
        prop_assert!(centroid.iter().all(|c| c.abs() < 1e-12));
        prop_assert!((s - 1.0).abs() < 1e-12);
        for (a, b) in once.iter().zip(&twice) {
            for c in 0..3 {
                prop_assert!((a[c] - b[c]).abs() < 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn parameter_count_matches_enumeration(layers in 0usize..3, heads in 1usize..3, hd in 1usize..4, ratio in 1usize..4, len in 1usize..9, patch in 1usize..3) {
        let cfg = ViPFormerConfig {
            layers,
            heads,
            dim: heads * hd * 2,
            mlp_ratio: ratio,
            length: len,
            neighbors: 4,
            patch,
            image_height: 4 * patch,
            image_width: 2 * patch,
            point_hidden: 6,
            out_dim: 5,
            ..ViPFormerConfig::tiny()
        };
        let model = ViPFormer::<f64>::new(cfg.clone(), &RngStream::new(0)).unwrap();
        let enumerated: usize = model.weights.iter().filter(|p| p.kind == ParamKind::Learnable).map(|p| p.value.numel()).sum();
        prop_assert_eq!(count_parameters(&cfg), enumerated);
        prop_assert_eq!(model.num_parameters(), enumerated);
    }

    #[test]
    fn probe_accuracy_survives_affine_feature_maps(seed: u64, shift in -5.0f64..5.0) {
        let (x, y, xt, yt) = three_blobs(seed);
        let d = x.shape()[1];
        // Random well-conditioned invertible map: identity plus a small perturbation.
        let mut r = RngStream::new(seed ^ 9);
        let m: Vec<f64> = (0..d * d).map(|i| if i % (d + 1) == 0 { 2.0 } else { 0.0 } + 0.3 * r.normal()).collect();
        let map = |t: &Tensor<f64>| {
            let n = t.rows();
            let mut v = vec![0.0; n * d];
            for i in 0..n {
                for j in 0..d {
                    v[i * d + j] = shift + (0..d).map(|k| t.row(i)[k] * m[k * d + j]).sum::<f64>();
                }
            }
            Tensor::from_vec(&[n, d], v).unwrap()
        };
        let cfg = ProbeConfig::default();
        let base = linear_probe(&x, &y, &xt, &yt, &cfg).unwrap();
        let mapped = linear_probe(&map(&x), &y, &map(&xt), &yt, &cfg).unwrap();
        prop_assert!((base - mapped).abs() <= 0.01 + 1e-12, "{} vs {}", base, mapped);
    }

    #[test]
    fn fewshot_ignores_label_ids(seed: u64) {
        let (x, y, _, _) = three_blobs(seed);
        let relabel = [7usize, 2, 11];
        let y2: Vec<usize> = y.iter().map(|&c| relabel[c]).collect();
        let spec = FewShotSpec { n_way: 2, k_shot: 3, runs: 4, query_per_class: 5 };
        let rng = RngStream::new(seed ^ 10);
        let a = fewshot_on_features(&x, &y, &spec, &ProbeConfig::default(), &rng).unwrap();
        let b = fewshot_on_features(&x, &y2, &spec, &ProbeConfig::default(), &rng).unwrap();
        prop_assert_eq!(a.mean, b.mean);
        prop_assert!(a.accuracies.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(a.std >= 0.0);
    }
}

/// Three overlapping Gaussian classes in 4-D, train and test draws.
fn three_blobs(seed: u64) -> (Tensor<f64>, Vec<usize>, Tensor<f64>, Vec<usize>) {
    let draw = |s: u64| {
        let mut r = RngStream::new(s);
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for i in 0..60 {
            let c = i % 3;
            for k in 0..4 {
                x.push(if k == c { 1.5 } else { 0.0 } + r.normal());
            }
            y.push(c);
        }
        (Tensor::from_vec(&[60, 4], x).unwrap(), y)
    };
    let (x, y) = draw(seed);
    let (xt, yt) = draw(seed ^ 0xabc);
    (x, y, xt, yt)
}

#[test]
fn adamw_without_decay_tracks_adam_for_100_steps() {
    let cfg = AdamWConfig {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    let mut store = ParamStore::<f64>::new();
    let init = random_matrix(3, 5, 1);
    store.insert("w", init.clone(), ParamKind::Learnable).unwrap();
    let mut state = AdamWState::new(cfg, &store);
    let mut reference = AdamReference::new(15);
    let mut theta = init.data().to_vec();
    let mut r = RngStream::new(2);
    for step in 0..100 {
        let g: Vec<f64> = (0..15).map(|_| r.normal()).collect();
        let lr = 1e-3 * (1.0 + (step % 7) as f64);
        let grads = std::collections::HashMap::from([("w".to_string(), g.clone())]);
        adamw_step(&mut store, &grads, &mut state, lr, &|_| true).unwrap();
        reference.step(&mut theta, &g, lr, cfg.beta1, cfg.beta2, cfg.eps);
    }
    let got = store.get("w").unwrap().data();
    let worst = got.iter().zip(&theta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-10, "max divergence {worst}");
}
