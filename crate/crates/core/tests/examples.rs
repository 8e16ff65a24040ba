//! Worked input/output examples for each module.

use vipformer::contrast::{cmc_loss, combined_value, imc_loss, ContrastConfig, ContrastMode};
use vipformer::data::{
    generate_synthetic, handcrafted_features, load_points, synthesize, Dataset, LoadOptions, Split,
    SyntheticSpec,
};
use vipformer::data::formats::write_points;
use vipformer::eval::{
    extract_embeddings, fewshot_on_features, linear_probe, EmbedOptions, FewShotSpec, ProbeConfig,
};
use vipformer::gradcheck::grad_check;
use vipformer::model::{GradMode, ParamKind, ParamStore, ViPFormer, ViPFormerConfig};
use vipformer::tokenize::{build_point_patches, PointPatchSequence};
use vipformer::train::{adamw_step, AdamWConfig, AdamWState};
use vipformer::verify::{matmul_naive, nt_xent_direct};
use vipformer::{Error, RngStream, Tape, Tensor};

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape, v.to_vec()).unwrap()
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = RngStream::new(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.normal()).collect()).unwrap()
}

fn unary(x: Tensor<f64>, f: impl Fn(&mut Tape<f64>, vipformer::Var) -> vipformer::Var) -> Vec<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let y = f(&mut tape, v);
    tape.value(y).data().to_vec()
}

fn matmul(a: Tensor<f64>, b: Tensor<f64>) -> vipformer::Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(a), tape.constant(b));
    let c = tape.matmul(a, b)?;
    Ok(tape.value(c).clone())
}

#[test]
fn matmul_examples() {
    let a = t(&[2, 2], &[0.3, -1.0, 2.5, 4.0]);
    assert_eq!(matmul(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), a.clone()).unwrap(), a);
    let c = matmul(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), t(&[2, 1], &[5.0, 6.0])).unwrap();
    assert_eq!(c.data(), &[17.0, 39.0]);
    let (a, b) = (randn(&[3, 4], 1), randn(&[4, 2], 2));
    let want = matmul_naive(a.data(), b.data(), 3, 4, 2);
    let got = matmul(a, b).unwrap();
    assert!(got.data().iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));
    let err = matmul(randn(&[2, 3], 3), randn(&[2, 3], 4)).unwrap_err();
    assert!(matches!(err, Error::Shape(ref m) if m.contains("[2, 3]")), "{err}");
}

#[test]
fn softmax_examples() {
    let s = |v: &[f64]| unary(t(&[v.len()], v), |tp, x| tp.softmax(x).unwrap());
    assert!(s(&[0.0, 0.0, 0.0]).iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
    let big = s(&[1000.0, 0.0]);
    assert!((big[0] - 1.0).abs() < 1e-6 && big[1].abs() < 1e-6);
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (p, v) in s(&[1.0, 2.0, 3.0]).iter().zip([1.0f64, 2.0, 3.0]) {
        assert!((p - v.exp() / z).abs() < 1e-15);
    }
    let mut tape = Tape::<f64>::new();
    let empty = tape.constant(Tensor::zeros(&[0]));
    assert!(matches!(tape.softmax(empty), Err(Error::Shape(_))));
}

fn ln(x: Tensor<f64>, eps: f64) -> vipformer::Result<Vec<f64>> {
    let d = x.last_dim();
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let g = tape.constant(Tensor::full(&[d], 1.0));
    let b = tape.constant(Tensor::zeros(&[d]));
    let y = tape.layer_norm(xv, g, b, eps)?;
    Ok(tape.value(y).data().to_vec())
}

#[test]
fn layer_norm_examples() {
    assert!(ln(t(&[1, 4], &[2.5; 4]), 1e-5).unwrap().iter().all(|&v| v == 0.0));
    let y = ln(t(&[1, 2], &[1.0, -1.0]), 1e-12).unwrap();
    assert!((y[0] - 1.0).abs() < 1e-9 && (y[1] + 1.0).abs() < 1e-9);
    let x = randn(&[1, 7], 5);
    let mean = x.data().iter().sum::<f64>() / 7.0;
    let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
    for (got, v) in ln(x.clone(), 1e-5).unwrap().iter().zip(x.data()) {
        assert!((got - (v - mean) / (var + 1e-5).sqrt()).abs() < 1e-12);
    }
    assert!(matches!(ln(x.clone(), 0.0), Err(Error::Parameter(_))));
    assert!(matches!(ln(x, -1.0), Err(Error::Parameter(_))));
}

#[test]
fn gelu_examples() {
    let y = unary(t(&[2], &[0.0, 1.0]), |tp, x| tp.gelu(x));
    assert_eq!(y[0], 0.0);
    let phi1 = 0.5 * (1.0 + libm::erf(1.0 / std::f64::consts::SQRT_2));
    assert!((y[1] - phi1).abs() < 1e-12, "{} vs {phi1}", y[1]);
}

#[test]
fn backward_examples() {
    let mut tape = Tape::<f64>::new();
    let w = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
    let sq = tape.mul(w, w).unwrap();
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &[2.0, 4.0, 6.0]);

    let mut tape = Tape::<f64>::new();
    let w = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
    let sq = tape.mul(w, w).unwrap();
    assert!(matches!(tape.backward(sq), Err(Error::Contract(_))));

    let e = grad_check(
        |tp, x| {
            let s = tp.mul(x, x)?;
            Ok(tp.sum(s))
        },
        &randn(&[5], 6),
        1e-5,
    )
    .unwrap();
    assert!(e < 1e-8, "{e}");
    assert!(grad_check(|_, x| Ok(x), &randn(&[2], 7), 1e-5).is_err());
}

#[test]
fn table_setting_point_patches() {
    let pts = randn(&[2048, 3], 8);
    let seq = build_point_patches(&pts, 128, 32, &mut RngStream::new(0)).unwrap();
    assert_eq!(seq.patches.shape(), &[128, 96]);
    assert_eq!(seq.centers.shape(), &[128, 3]);
    let small = randn(&[10, 3], 9);
    assert!(matches!(build_point_patches(&small, 11, 2, &mut RngStream::new(0)), Err(Error::Parameter(_))));
    assert!(matches!(build_point_patches(&small, 0, 2, &mut RngStream::new(0)), Err(Error::Parameter(_))));
    assert!(matches!(build_point_patches(&small, 2, 11, &mut RngStream::new(0)), Err(Error::Parameter(_))));
}

fn small_config() -> ViPFormerConfig {
    ViPFormerConfig {
        layers: 1,
        heads: 2,
        dim: 8,
        mlp_ratio: 2,
        length: 6,
        neighbors: 4,
        patch: 4,
        image_height: 8,
        image_width: 8,
        point_hidden: 8,
        out_dim: 5,
        ..ViPFormerConfig::tiny()
    }
}

fn point_seqs(model: &ViPFormer<f64>, b: usize, seed: u64) -> Vec<PointPatchSequence<f64>> {
    (0..b)
        .map(|i| model.tokenize_points(&randn(&[20, 3], seed + i as u64), &mut RngStream::new(i as u64)).unwrap())
        .collect()
}

#[test]
fn embedding_examples() {
    let mut model = ViPFormer::<f64>::new(small_config(), &RngStream::new(1)).unwrap();
    *model.weights.get_mut("image_pos").unwrap() = Tensor::zeros(&[4, 8]);
    let img = model.tokenize_image(&Tensor::zeros(&[8, 8, 3])).unwrap();
    let mut tape = Tape::new();
    let mut fwd = model.bind(&mut tape, false, GradMode::None);
    let z = fwd.embed_image(&[img]).unwrap();
    assert!(tape.value(z).data().iter().all(|&v| v == 0.0));

    let big = ViPFormer::<f32>::new(ViPFormerConfig::table_ii(), &RngStream::new(0)).unwrap();
    let img = big.tokenize_image(&Tensor::zeros(&[144, 144, 3])).unwrap();
    let cloud = Tensor::<f64>::from_vec(&[2048, 3], randn(&[2048, 3], 2).data().to_vec()).unwrap().cast();
    let pts = big.tokenize_points(&cloud, &mut RngStream::new(3)).unwrap();
    let mut tape = Tape::new();
    let mut fwd = big.bind(&mut tape, false, GradMode::None);
    let zi = fwd.embed_image(&[img]).unwrap();
    let zp = fwd.embed_points(&[pts]).unwrap();
    assert_eq!(tape.shape(zi), &[1, 144, 384]);
    assert_eq!(tape.shape(zp), &[1, 128, 384]);
}

#[test]
fn encoder_examples() {
    let mut cfg = small_config();
    cfg.layers = 0;
    let model = ViPFormer::<f64>::new(cfg, &RngStream::new(2)).unwrap();
    let x = randn(&[2, 3, 8], 3);
    let mut tape = Tape::new();
    let mut fwd = model.bind(&mut tape, false, GradMode::None);
    let xv = fwd.tape.constant(x.clone());
    let y = fwd.encoder(xv, &mut RngStream::new(0)).unwrap();
    assert_eq!(tape.value(y), &x);

    let model = ViPFormer::<f64>::new(small_config(), &RngStream::new(2)).unwrap();
    let mut tape = Tape::new();
    let mut fwd = model.bind(&mut tape, false, GradMode::None);
    let xv = fwd.tape.constant(randn(&[3, 1, 8], 4));
    fwd.encoder(xv, &mut RngStream::new(0)).unwrap();
    let maps = tape.attention_maps();
    assert_eq!(maps.len(), 1);
    assert!(maps[0].probs.iter().all(|&p| p == 1.0));
    let mut tape = Tape::new();
    let mut fwd = model.bind(&mut tape, false, GradMode::None);
    let empty = fwd.tape.constant(Tensor::zeros(&[1, 0, 8]));
    assert!(matches!(fwd.encoder(empty, &mut RngStream::new(0)), Err(Error::Shape(_))));
}

#[test]
fn pooling_examples() {
    let pool = |x: Tensor<f64>| unary(x, |tp, v| tp.pool_max_mean(v).unwrap());
    assert_eq!(pool(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 0.0])), vec![3.0, 2.0, 2.0, 1.0]);
    let z = randn(&[1, 1, 5], 10);
    let mut want = z.data().to_vec();
    want.extend_from_slice(z.data());
    assert_eq!(pool(z), want);
    let mut tape = Tape::<f64>::new();
    let empty = tape.constant(Tensor::zeros(&[1, 0, 2]));
    assert!(tape.pool_max_mean(empty).is_err());
}

#[test]
fn output_adapter_examples() {
    for (cfg, d) in [(ViPFormerConfig::table_ii(), 384), (ViPFormerConfig::table_i(), 256)] {
        let w: ParamStore<f32> = vipformer::model::init_weights(&cfg, &RngStream::new(0)).unwrap();
        assert_eq!(w.get("output_adapter.fc1.weight").unwrap().shape(), &[2 * d, d]);
        assert_eq!(w.get("output_adapter.fc2.weight").unwrap().shape(), &[d, d]);
        assert_eq!(w.get("output_adapter.bn1.gamma").unwrap().shape(), &[2 * d]);
    }

    let model = ViPFormer::<f64>::new(small_config(), &RngStream::new(3)).unwrap();
    let mut tape = Tape::new();
    let mut fwd = model.bind(&mut tape, true, GradMode::None);
    let rows = fwd.tape.constant(Tensor::from_vec(&[4, 16], randn(&[16], 11).data().repeat(4)).unwrap());
    let o = fwd.output_adapter(rows).unwrap();
    assert!(tape.value(o).is_finite());

    let seqs = point_seqs(&model, 3, 20);
    let mut tape = Tape::new();
    let mut fwd = model.bind(&mut tape, false, GradMode::None);
    let err = fwd.forward_points(&seqs, &mut RngStream::new(0)).unwrap_err();
    assert!(matches!(err, Error::Contract(ref m) if m.contains("calibrate")), "{err}");
    let mut model = model;
    model.calibrate_batch_norm(std::slice::from_ref(&seqs)).unwrap();
    let mut tape = Tape::new();
    let mut fwd = model.bind(&mut tape, false, GradMode::None);
    let p = fwd.forward_points(&seqs, &mut RngStream::new(0)).unwrap();
    assert_eq!(tape.shape(p), &[3, 5]);
}

#[test]
fn classifier_examples() {
    let mut model = ViPFormer::<f64>::new(small_config(), &RngStream::new(4)).unwrap();
    let seqs = point_seqs(&model, 2, 30);
    let mut tape = Tape::new();
    let mut fwd = model.bind(&mut tape, false, GradMode::None);
    assert!(matches!(fwd.classify(&seqs, &mut RngStream::new(0)), Err(Error::Contract(_))));
    model.add_classifier(15, &RngStream::new(5)).unwrap();
    let mut tape = Tape::new();
    let mut fwd = model.bind(&mut tape, false, GradMode::None);
    let logits = fwd.classify(&seqs, &mut RngStream::new(0)).unwrap();
    assert_eq!(tape.shape(logits), &[2, 15]);
}

#[test]
fn contrastive_examples() {
    let p = randn(&[3, 4], 40);
    let f = randn(&[3, 4], 41);
    let rows = |x: &Tensor<f64>| x.data().chunks(4).map(<[f64]>::to_vec).collect::<Vec<_>>();
    assert!((cmc_loss(&p, &f, 0.2).unwrap() - nt_xent_direct(&rows(&p), &rows(&f), 0.2)).abs() < 1e-10);

    let p2 = randn(&[3, 4], 42);
    let a = imc_loss(&p, &p2, 0.1).unwrap();
    let b = cmc_loss(&p, &f, 0.1).unwrap();
    let at = |alpha: f64, mode: ContrastMode| {
        let cfg = ContrastConfig {
            alpha,
            mode,
            tau: 0.1,
            ..Default::default()
        };
        combined_value(&p, Some(&p2), Some(&f), &cfg).unwrap().total
    };
    assert_eq!(at(0.0, ContrastMode::Both), a);
    assert_eq!(at(0.0, ContrastMode::Both), at(0.7, ContrastMode::ImcOnly));
    assert!((at(1.0, ContrastMode::Both) - (a + b)).abs() < 1e-12);
    assert!((at(2.0, ContrastMode::Both) - (a + 2.0 * b)).abs() < 1e-12);
    assert_eq!(at(3.0, ContrastMode::CmcOnly), b);

    // Aligned positives with orthogonal negatives: sharper temperature, lower loss.
    let eye = t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let losses: Vec<f64> = [1.0, 0.5, 0.2, 0.1, 0.05].iter().map(|&tau| imc_loss(&eye, &eye, tau).unwrap()).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn identical_parameters_follow_identical_trajectories() {
    let mut store = ParamStore::<f64>::new();
    let init = randn(&[4], 50);
    store.insert("a", init.clone(), ParamKind::Learnable).unwrap();
    store.insert("b", init, ParamKind::Learnable).unwrap();
    let cfg = AdamWConfig::default();
    let mut state = AdamWState::new(cfg, &store);
    let mut r = RngStream::new(51);
    for _ in 0..20 {
        let g: Vec<f64> = (0..4).map(|_| r.normal()).collect();
        let grads = std::collections::HashMap::from([("a".to_string(), g.clone()), ("b".to_string(), g)]);
        adamw_step(&mut store, &grads, &mut state, 1e-2, &|_| true).unwrap();
    }
    assert_eq!(store.get("a"), store.get("b"));
}

fn blobs(classes: usize, per: usize, d: usize, sep: f64, seed: u64) -> (Tensor<f64>, Vec<usize>) {
    let mut r = RngStream::new(seed);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..classes * per {
        let c = i % classes;
        for k in 0..d {
            x.push(if k == c { sep } else { 0.0 } + r.normal());
        }
        y.push(c);
    }
    (Tensor::from_vec(&[classes * per, d], x).unwrap(), y)
}

#[test]
fn probe_examples() {
    let (x, y) = blobs(3, 30, 4, 8.0, 60);
    assert_eq!(linear_probe(&x, &y, &x, &y, &ProbeConfig::default()).unwrap(), 1.0);

    let c = 4;
    let mut total = 0.0;
    for trial in 0..10 {
        let (x, mut y) = blobs(c, 50, 6, 3.0, 100 + trial);
        let (xt, mut yt) = blobs(c, 50, 6, 3.0, 200 + trial);
        let mut r = RngStream::new(300 + trial);
        r.shuffle(&mut y);
        r.shuffle(&mut yt);
        total += linear_probe(&x, &y, &xt, &yt, &ProbeConfig::default()).unwrap();
    }
    let mean = total / 10.0;
    assert!((mean - 1.0 / c as f64).abs() <= 0.1, "{mean}");
}

#[test]
fn fewshot_examples() {
    let x = t(&[40, 2], &[[1.0, 0.0]; 20].concat().into_iter().chain([[0.0, 1.0]; 20].concat()).collect::<Vec<_>>());
    let y: Vec<usize> = (0..40).map(|i| i / 20).collect();
    let spec = FewShotSpec {
        n_way: 2,
        k_shot: 1,
        runs: 10,
        query_per_class: 5,
    };
    let rep = fewshot_on_features(&x, &y, &spec, &ProbeConfig::default(), &RngStream::new(0)).unwrap();
    assert_eq!(rep.accuracies.len(), 10);
    assert_eq!((rep.mean, rep.std), (1.0, 0.0));

    let (noise, _) = blobs(1, 250, 16, 0.0, 70);
    let labels: Vec<usize> = (0..250).map(|i| i % 5).collect();
    let spec = FewShotSpec {
        n_way: 5,
        k_shot: 10,
        runs: 10,
        query_per_class: 20,
    };
    let rep = fewshot_on_features(&noise, &labels, &spec, &ProbeConfig::default(), &RngStream::new(1)).unwrap();
    assert!((rep.mean - 0.2).abs() <= 0.15, "{}", rep.mean);
}

#[test]
fn embedding_extraction_examples() {
    let cfg = small_config();
    let mut model = ViPFormer::<f32>::new(cfg, &RngStream::new(6)).unwrap();
    let clouds: Vec<Tensor<f32>> = (0..4).map(|i| randn(&[20, 3], 80 + i).cast()).collect();
    let seqs: Vec<_> = clouds.iter().map(|c| model.tokenize_points(c, &mut RngStream::new(0)).unwrap()).collect();
    model.calibrate_batch_norm(&[seqs]).unwrap();
    let refs: Vec<&Tensor<f32>> = clouds.iter().collect();
    let opts = EmbedOptions {
        batch_size: 3,
        ..Default::default()
    };
    let a = extract_embeddings(&model, &refs, &opts).unwrap();
    assert_eq!(a, extract_embeddings(&model, &refs, &opts).unwrap());
    let one = EmbedOptions { batch_size: 1, ..opts };
    assert_eq!(a, extract_embeddings(&model, &refs, &one).unwrap());
    let dup = extract_embeddings(&model, &[refs[2], refs[2]], &one).unwrap();
    assert_eq!(dup.row(0), dup.row(1));
}

#[test]
fn corpus_examples() {
    let spec = SyntheticSpec {
        class_count: 8,
        per_class: 64,
        n_points: 64,
        image_size: 8,
        views: 4,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synthetic(&spec, dir.path(), &RngStream::new(0)).unwrap();
    assert_eq!(manifest.entries.len(), 512);
    let ds = Dataset::load(dir.path(), LoadOptions::default()).unwrap();
    assert_eq!(ds.samples.len(), 512);
    assert!(ds.samples.iter().all(|s| s.views.len() == 4));

    // Same seed, same bytes.
    let again = tempfile::tempdir().unwrap();
    generate_synthetic(&spec, again.path(), &RngStream::new(0)).unwrap();
    let files = |root: &std::path::Path| {
        let mut out = Vec::new();
        for sub in ["", "points", "images"] {
            let mut names: Vec<_> = std::fs::read_dir(root.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
            names.sort();
            for p in names.into_iter().filter(|p| p.is_file()) {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
        out
    };
    assert_eq!(files(dir.path()), files(again.path()));
}

#[test]
fn subsampling_and_reload_examples() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cloud.vpts");
    let mut r = RngStream::new(90);
    let raw: Vec<[f32; 3]> = (0..2048).map(|_| [r.normal() as f32 * 3.0 + 1.0, r.normal() as f32, r.normal() as f32]).collect();
    write_points(&path, &raw).unwrap();
    let pts = load_points(&path, Some(1024), &mut RngStream::new(1)).unwrap();
    assert_eq!(pts.shape(), &[1024, 3]);

    let full = load_points(&path, None, &mut RngStream::new(1)).unwrap();
    let back: Vec<[f32; 3]> = full.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    write_points(&path, &back).unwrap();
    let again = load_points(&path, None, &mut RngStream::new(1)).unwrap();
    assert!(full.max_abs_diff(&again) < 1e-6);
}

#[test]
fn handcrafted_features_separate_the_classes() {
    let spec = SyntheticSpec {
        per_class: 64,
        image_size: 8,
        views: 1,
        ..Default::default()
    };
    let samples = synthesize(&spec, &RngStream::new(0)).unwrap();
    // 32 per class for training, the remaining 32 per class for testing.
    let (mut tr, mut tr_y, mut te, mut te_y) = (vec![], vec![], vec![], vec![]);
    for (i, s) in samples.iter().enumerate() {
        let f = handcrafted_features(&s.points);
        if i % spec.per_class < 32 {
            tr.extend(f);
            tr_y.push(s.class_id);
        } else {
            te.extend(f);
            te_y.push(s.class_id);
        }
    }
    let d = tr.len() / tr_y.len();
    let tr = Tensor::from_vec(&[tr_y.len(), d], tr).unwrap();
    let te = Tensor::from_vec(&[te_y.len(), d], te).unwrap();
    let cfg = ProbeConfig {
        iterations: 2000,
        ..Default::default()
    };
    let acc = linear_probe(&tr, &tr_y, &te, &te_y, &cfg).unwrap();
    assert!(acc >= 0.9, "handcrafted probe accuracy {acc}");
    assert_eq!(samples.iter().filter(|s| s.split == Split::Train).count(), 8 * 48);
}
