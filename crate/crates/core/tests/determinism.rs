use vipformer::contrast::ContrastMode;
use vipformer::data::{synthesize, Sample, Split, SyntheticSpec};
use vipformer::model::{ViPFormer, ViPFormerConfig};
use vipformer::train::{
    classifier_model, EpochMetrics, FinetuneConfig, FinetuneData, Finetuner, PretrainConfig, PretrainData, Pretrainer,
};
use vipformer::{Error, RngStream};

fn corpus(classes: usize, per_class: usize) -> Vec<Sample> {
    let spec = SyntheticSpec {
        class_count: classes,
        per_class,
        n_points: 128,
        image_size: 16,
        views: 2,
        ..Default::default()
    };
    synthesize(&spec, &RngStream::new(3)).unwrap()
}

fn model_config() -> ViPFormerConfig {
    ViPFormerConfig {
        length: 16,
        neighbors: 8,
        image_height: 16,
        image_width: 16,
        ..ViPFormerConfig::tiny()
    }
}

fn pretrain_cfg(serial: bool) -> PretrainConfig {
    PretrainConfig {
        epochs: 2,
        batch_size: 8,
        seed: 11,
        serial_loading: serial,
        ..Default::default()
    }
}

/// Per-step losses and per-epoch metrics of a short pretraining run.
fn pretrain_trace(samples: &[Sample], cfg: PretrainConfig) -> (Vec<String>, Vec<EpochMetrics>, Pretrainer) {
    let train: Vec<Sample> = samples.iter().filter(|s| s.split == Split::Train).cloned().collect();
    let data = PretrainData {
        train: &train,
        probe_fit: train.iter().collect(),
        probe_eval: samples.iter().filter(|s| s.split != Split::Train).collect(),
    };
    let model = ViPFormer::new(model_config(), &RngStream::new(cfg.seed)).unwrap();
    let mut t = Pretrainer::new(model, cfg).unwrap();
    let mut steps = Vec::new();
    t.run(&data, None, &mut |_, r| {
        steps.push(r.tsv());
        Ok(())
    })
    .unwrap();
    let log = t.log.clone();
    (steps, log, t)
}

fn in_pool<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

#[test]
fn strict_pretraining_reruns_bit_identically() {
    // 8 classes × 8 samples = 64 samples.
    let samples = corpus(8, 8);
    let (a, la, _) = pretrain_trace(&samples, pretrain_cfg(true));
    let (b, lb, _) = pretrain_trace(&samples, pretrain_cfg(true));
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert_eq!(la.len(), 2);
}

#[test]
fn worker_count_does_not_change_results() {
    let samples = corpus(4, 8);
    let one = in_pool(1, || pretrain_trace(&samples, pretrain_cfg(false)));
    let three = in_pool(3, || pretrain_trace(&samples, pretrain_cfg(false)));
    let serial = in_pool(3, || pretrain_trace(&samples, pretrain_cfg(true)));
    assert_eq!(one.0, three.0);
    assert_eq!(one.0, serial.0);
    assert_eq!(one.2.model.weights, three.2.model.weights);

    let finetune = |threads| {
        in_pool(threads, || {
            let data = FinetuneData {
                train: samples.iter().filter(|s| s.split == Split::Train).collect(),
                val: samples.iter().filter(|s| s.split != Split::Train).collect(),
                num_classes: 4,
            };
            let model = classifier_model(None, &model_config(), 4, 5).unwrap();
            let cfg = FinetuneConfig {
                epochs: 2,
                batch_size: 8,
                ..Default::default()
            };
            let mut t = Finetuner::new(model, cfg).unwrap();
            t.run(&data, &mut |_| {}).unwrap();
            t.log.iter().map(|e| e.tsv()).collect::<Vec<_>>()
        })
    };
    assert_eq!(finetune(1), finetune(3));
}

#[test]
fn best_checkpoint_tracks_the_best_probe() {
    let samples = corpus(4, 8);
    let mut cfg = pretrain_cfg(true);
    cfg.epochs = 4;
    let (_, log, t) = pretrain_trace(&samples, cfg);
    let best = log.iter().filter_map(|m| m.probe_acc).fold(f64::NEG_INFINITY, f64::max);
    let record = t.best.clone().unwrap();
    assert_eq!(record.value, best);
    let first_best = log.iter().find(|m| m.probe_acc == Some(best)).unwrap();
    assert_eq!(record.epoch, first_best.epoch);
    assert!(t.best_checkpoint().is_some());
}

#[test]
fn alpha_zero_reproduces_imc_only_losses() {
    let samples = corpus(4, 8);
    let run = |mode: ContrastMode, alpha: f64| {
        let mut cfg = pretrain_cfg(true);
        cfg.contrast.mode = mode;
        cfg.contrast.alpha = alpha;
        let (steps, log, _) = pretrain_trace(&samples, cfg);
        let imc: Vec<String> = steps.iter().map(|s| s.split('\t').nth(3).unwrap().to_string()).collect();
        let total: Vec<String> = steps.iter().map(|s| s.split('\t').nth(5).unwrap().to_string()).collect();
        (imc, total, log)
    };
    let (imc_a, total_a, _) = run(ContrastMode::ImcOnly, 1.0);
    let (imc_b, total_b, log_b) = run(ContrastMode::Both, 0.0);
    assert_eq!(imc_a, imc_b);
    assert_eq!(total_a, total_b);
    assert!(log_b.iter().all(|m| m.cmc.is_some_and(f64::is_finite)));
}

#[test]
fn single_class_finetuning_is_perfect() {
    let samples = corpus(1, 16);
    let data = FinetuneData {
        train: samples.iter().filter(|s| s.split == Split::Train).collect(),
        val: samples.iter().filter(|s| s.split != Split::Train).collect(),
        num_classes: 1,
    };
    let model = classifier_model(None, &model_config(), 1, 0).unwrap();
    let cfg = FinetuneConfig {
        epochs: 1,
        batch_size: 4,
        ..Default::default()
    };
    let mut t = Finetuner::new(model, cfg).unwrap();
    t.run(&data, &mut |_| {}).unwrap();
    assert_eq!(t.log.last().unwrap().val_oa, 1.0);
}

#[test]
fn out_of_range_labels_are_data_errors() {
    let samples = corpus(2, 8);
    let data = FinetuneData {
        train: samples.iter().filter(|s| s.split == Split::Train).collect(),
        val: samples.iter().filter(|s| s.split != Split::Train).collect(),
        num_classes: 1,
    };
    let model = classifier_model(None, &model_config(), 1, 0).unwrap();
    let mut t = Finetuner::new(model, FinetuneConfig::default()).unwrap();
    assert!(matches!(t.run(&data, &mut |_| {}), Err(Error::Data(_))));
}

#[test]
fn non_finite_loss_aborts_without_touching_state() {
    let samples = corpus(2, 8);
    let train: Vec<Sample> = samples.iter().filter(|s| s.split == Split::Train).cloned().collect();
    let data = PretrainData {
        train: &train,
        probe_fit: vec![],
        probe_eval: vec![],
    };
    let mut model = ViPFormer::<f32>::new(model_config(), &RngStream::new(0)).unwrap();
    model.weights.get_mut("output_adapter.fc2.bias").unwrap().data_mut()[0] = f32::NAN;
    let mut t = Pretrainer::new(model, pretrain_cfg(true)).unwrap();
    let before = t.checkpoint().to_bytes();
    let err = t.step(&data).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    assert_eq!(t.checkpoint().to_bytes(), before);
}
