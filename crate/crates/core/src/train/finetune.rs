use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{BestRecord, Checkpoint, EpochAccum, Progress};
use super::optim::{adamw_step, AdamWConfig, AdamWState};
use super::schedule::SchedulerState;
use crate::augment::{apply_augmentation, AugmentationSpec};
use crate::autodiff::{Tape, Var};
use crate::data::{batch_indices, BatchMode, Sample};
use crate::error::{Error, Result};
use crate::eval::eval_stream;
use crate::model::{GradMode, ParamStore, ViPFormer};
use crate::real::Real;
use crate::rng::{Purpose, RngStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: AugmentationSpec,
    pub optimizer: AdamWConfig,
    pub scheduler: SchedulerState,
    /// Train only the classification head.
    pub freeze_encoder: bool,
    pub eval_seed: u64,
    /// See `PretrainConfig::serial_loading`.
    pub serial_loading: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            seed: 0,
            augment: AugmentationSpec::default(),
            optimizer: AdamWConfig::default(),
            scheduler: SchedulerState {
                base_peak: 5e-4,
                peak_decay: 1.0,
                cycle_len: 50.0,
                warmup_len: 2.0,
                per_step: true,
            },
            freeze_encoder: false,
            eval_seed: 0,
            serial_loading: false,
        }
    }
}

/// Mean softmax cross-entropy of `[B, C]` logits, recorded as one scalar
/// node; evaluated in `f64`.
pub fn cross_entropy<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<(Var, f64)> {
    let v = tape.value(logits);
    if v.ndim() != 2 || v.shape()[0] != labels.len() {
        return Err(Error::shape(format!(
            "logits {:?} do not match {} labels",
            v.shape(),
            labels.len()
        )));
    }
    let (b, c) = (v.shape()[0], v.shape()[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Data(format!("class index {bad} out of range for {c} classes")));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(b * c);
    for (row, &y) in v.data().chunks(c).zip(labels) {
        let row: Vec<f64> = row.iter().map(|x| x.as_f64()).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        for (j, x) in row.iter().enumerate() {
            let p = (x - lse).exp();
            let g = (p - if j == y { 1.0 } else { 0.0 }) / b as f64;
            grad.push(T::lit(g));
        }
    }
    loss /= b as f64;
    let out = tape.custom_scalar(T::lit(loss), vec![(logits, grad)])?;
    Ok((out, loss))
}

/// Overall accuracy of the classifier on `samples` (eval mode, FPS from
/// [`eval_stream`]).
pub fn evaluate_oa(model: &ViPFormer<f32>, samples: &[&Sample], eval_seed: u64, batch_size: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("no samples to evaluate"));
    }
    let mut correct = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let seqs = chunk
            .iter()
            .map(|s| model.tokenize_points(&s.points, &mut eval_stream(eval_seed, &s.points)))
            .collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let mut fwd = model.bind(&mut tape, false, GradMode::None);
        let logits = fwd.classify(&seqs, &mut RngStream::new(0))?;
        let v = tape.value(logits);
        let c = v.last_dim();
        for (row, s) in v.data().chunks(c).zip(chunk) {
            let pred = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (j, &x)| if x > best.1 { (j, x) } else { best })
                .0;
            correct += usize::from(pred == s.class_id);
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

pub struct FinetuneData<'a> {
    pub train: Vec<&'a Sample>,
    pub val: Vec<&'a Sample>,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneEpoch {
    /// 1-based; entry 0 records the untrained model.
    pub epoch: u64,
    pub loss: f64,
    pub lr: f64,
    pub val_oa: f64,
}

pub const FINETUNE_HEADER: &str = "epoch\tloss\tlr\tval_oa";

impl FinetuneEpoch {
    pub fn tsv(&self) -> String {
        format!("{}\t{}\t{}\t{}", self.epoch, self.loss, self.lr, self.val_oa)
    }
}

/// Supervised classification training of the point branch plus head.
pub struct Finetuner {
    pub model: ViPFormer<f32>,
    pub optimizer: AdamWState<f32>,
    pub cfg: FinetuneConfig,
    pub progress: Progress,
    pub best: Option<BestRecord>,
    pub best_weights: Option<ParamStore<f32>>,
    pub log: Vec<FinetuneEpoch>,
    pub run: BTreeMap<String, String>,
}

impl Finetuner {
    /// `model` must already carry a classifier head.
    pub fn new(model: ViPFormer<f32>, cfg: FinetuneConfig) -> Result<Self> {
        cfg.augment.validate()?;
        cfg.optimizer.validate()?;
        cfg.scheduler.validate()?;
        if model.num_classes().is_none() {
            return Err(Error::contract("finetuning needs a model with a classifier head"));
        }
        let optimizer = AdamWState::new(cfg.optimizer, &model.weights);
        let progress = Progress {
            seed: cfg.seed,
            ..Default::default()
        };
        Ok(Self {
            model,
            optimizer,
            cfg,
            progress,
            best: None,
            best_weights: None,
            log: Vec::new(),
            run: BTreeMap::new(),
        })
    }

    /// Restores a finetuning checkpoint. Seed and scheduler come from the
    /// checkpoint; the remaining settings from `cfg`.
    pub fn resume(ckpt: Checkpoint, mut cfg: FinetuneConfig) -> Result<Self> {
        if ckpt.stage != "finetune" {
            return Err(Error::contract(format!(
                "cannot resume finetuning from a {} checkpoint",
                ckpt.stage
            )));
        }
        let optimizer = ckpt
            .optimizer
            .ok_or_else(|| Error::contract("checkpoint carries no optimizer state"))?;
        cfg.seed = ckpt.progress.seed;
        cfg.scheduler = ckpt.scheduler;
        cfg.optimizer = optimizer.config;
        let model = ViPFormer::from_parts(ckpt.model, ckpt.weights)?;
        let mut t = Self::new(model, cfg)?;
        t.optimizer = optimizer;
        t.progress = ckpt.progress;
        t.best = ckpt.best;
        t.run = ckpt.run;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            stage: "finetune".into(),
            model: self.model.config.clone(),
            run: self.run.clone(),
            weights: self.model.weights.clone(),
            optimizer: Some(self.optimizer.clone()),
            scheduler: self.cfg.scheduler,
            progress: self.progress,
            best: self.best.clone(),
        }
    }

    pub fn best_checkpoint(&self) -> Option<Checkpoint> {
        self.best_weights.as_ref().map(|w| Checkpoint {
            weights: w.clone(),
            optimizer: None,
            ..self.checkpoint()
        })
    }

    fn check(&self, data: &FinetuneData<'_>) -> Result<()> {
        let classes = self.model.num_classes().unwrap_or(0);
        if data.num_classes != classes {
            return Err(Error::Data(format!(
                "dataset has {} classes but the head predicts {classes}",
                data.num_classes
            )));
        }
        if let Some(s) = data.train.iter().chain(&data.val).find(|s| s.class_id >= classes) {
            return Err(Error::Data(format!(
                "sample {} has class {} outside [0, {classes})",
                s.sample_id, s.class_id
            )));
        }
        if data.train.is_empty() || data.val.is_empty() {
            return Err(Error::contract("finetuning needs nonempty train and validation splits"));
        }
        Ok(())
    }

    fn record(&mut self, epoch: u64, loss: f64, lr: f64, val_oa: f64) -> FinetuneEpoch {
        let e = FinetuneEpoch {
            epoch,
            loss,
            lr,
            val_oa,
        };
        if self.best.as_ref().is_none_or(|b| val_oa > b.value) {
            self.best = Some(BestRecord {
                metric: "val_oa".into(),
                value: val_oa,
                epoch,
            });
            self.best_weights = Some(self.model.weights.clone());
        }
        self.log.push(e.clone());
        e
    }

    /// One epoch of training followed by validation.
    pub fn train_epoch(&mut self, data: &FinetuneData<'_>) -> Result<FinetuneEpoch> {
        self.check(data)?;
        if self.log.is_empty() && self.progress.epoch == 0 {
            let oa = evaluate_oa(&self.model, &data.val, self.cfg.eval_seed, self.cfg.batch_size)?;
            self.record(0, f64::NAN, 0.0, oa);
        }
        let epoch = self.progress.epoch;
        let root = RngStream::new(self.progress.seed);
        let batches = batch_indices(
            data.train.len(),
            self.cfg.batch_size,
            BatchMode::Eval,
            Some(&mut root.substream(Purpose::Shuffle, epoch)),
        )?;
        let spe = batches.len();
        let freeze = self.cfg.freeze_encoder;
        let grad_mode = if freeze { GradMode::HeadOnly } else { GradMode::All };
        let mut acc = EpochAccum::default();
        for (step, batch) in batches.iter().enumerate() {
            let prep = |&i: &usize| {
                let s = data.train[i];
                let aug = root.substream(Purpose::Augment, epoch).child(i as u64);
                let pts = apply_augmentation(&s.points, &self.cfg.augment, &aug.child(1))?;
                let mut fps = root.substream(Purpose::Sampling, epoch).child(i as u64);
                self.model.tokenize_points(&pts, &mut fps)
            };
            let seqs = if self.cfg.serial_loading {
                batch.iter().map(prep).collect::<Result<Vec<_>>>()?
            } else {
                batch.par_iter().map(prep).collect::<Result<Vec<_>>>()?
            };
            let labels: Vec<usize> = batch.iter().map(|&i| data.train[i].class_id).collect();
            let lr = self.cfg.scheduler.lr_for_step(epoch as usize, step, spe);
            let mut dropout = root.substream(Purpose::Dropout, self.progress.global_step);
            let mut tape = Tape::new();
            let (loss, grads) = {
                let mut fwd = self.model.bind(&mut tape, true, grad_mode);
                let logits = fwd.classify(&seqs, &mut dropout)?;
                let (node, loss) = cross_entropy(&mut *fwd.tape, logits, &labels)?;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss {loss} at epoch {} step {step}",
                        epoch + 1
                    )));
                }
                fwd.tape.backward(node)?;
                (loss, fwd.grads())
            };
            adamw_step(&mut self.model.weights, &grads, &mut self.optimizer, lr, &|name| {
                !freeze || name.starts_with("head.")
            })?;
            acc.total_sum += loss;
            acc.steps += 1;
            acc.last_lr = lr;
            self.progress.global_step += 1;
        }
        self.progress.epoch += 1;
        let oa = evaluate_oa(&self.model, &data.val, self.cfg.eval_seed, self.cfg.batch_size)?;
        Ok(self.record(self.progress.epoch, acc.total_sum / acc.steps.max(1) as f64, acc.last_lr, oa))
    }

    /// Trains for the configured number of epochs.
    pub fn run(&mut self, data: &FinetuneData<'_>, on_epoch: &mut dyn FnMut(&FinetuneEpoch)) -> Result<()> {
        self.check(data)?;
        if self.log.is_empty() && self.progress.epoch == 0 {
            let oa = evaluate_oa(&self.model, &data.val, self.cfg.eval_seed, self.cfg.batch_size)?;
            let e = self.record(0, f64::NAN, 0.0, oa);
            on_epoch(&e);
        }
        while self.progress.epoch < self.cfg.epochs as u64 {
            let e = self.train_epoch(data)?;
            on_epoch(&e);
        }
        Ok(())
    }

    pub fn best_oa(&self) -> f64 {
        self.best.as_ref().map_or(0.0, |b| b.value)
    }
}

/// Attaches a freshly initialised head to `backbone` (or to a new model
/// when `None`, i.e. training from scratch).
pub fn classifier_model(
    backbone: Option<ViPFormer<f32>>,
    config: &crate::model::ViPFormerConfig,
    num_classes: usize,
    seed: u64,
) -> Result<ViPFormer<f32>> {
    let rng = RngStream::new(seed);
    let mut model = match backbone {
        Some(m) => m,
        None => ViPFormer::new(config.clone(), &rng)?,
    };
    model.add_classifier(num_classes, &rng)?;
    Ok(model)
}

/// Outcome of a complete finetuning run.
pub struct FinetuneOutcome {
    pub best_oa: f64,
    pub log: Vec<FinetuneEpoch>,
    pub last: Checkpoint,
    pub best: Option<Checkpoint>,
}

/// Finetunes a pretrained backbone, or a freshly initialised model when
/// `backbone` is `None`.
pub fn finetune(
    backbone: Option<ViPFormer<f32>>,
    config: &crate::model::ViPFormerConfig,
    data: &FinetuneData<'_>,
    cfg: FinetuneConfig,
) -> Result<FinetuneOutcome> {
    let model = classifier_model(backbone, config, data.num_classes, cfg.seed)?;
    let mut t = Finetuner::new(model, cfg)?;
    t.run(data, &mut |_| {})?;
    Ok(FinetuneOutcome {
        best_oa: t.best_oa(),
        log: t.log.clone(),
        last: t.checkpoint(),
        best: t.best_checkpoint(),
    })
}

/// Pretrain-finetune against train-from-scratch under the same budget.
pub struct StrategyComparison {
    pub pretrained: FinetuneOutcome,
    pub scratch: FinetuneOutcome,
}

impl StrategyComparison {
    /// Markdown table: one row per strategy.
    pub fn table(&self) -> String {
        let mut out = String::from("| Strategy | Epochs | Initial val OA | Final val OA | Best val OA |\n|---|---|---|---|---|\n");
        for (name, o) in [("Pretrain-Finetune", &self.pretrained), ("Train-from-scratch", &self.scratch)] {
            let first = o.log.first().map_or(f64::NAN, |e| e.val_oa);
            let last = o.log.last().map_or(f64::NAN, |e| e.val_oa);
            let epochs = o.log.last().map_or(0, |e| e.epoch);
            out.push_str(&format!(
                "| {name} | {epochs} | {:.2}% | {:.2}% | {:.2}% |\n",
                100.0 * first,
                100.0 * last,
                100.0 * o.best_oa
            ));
        }
        out
    }
}

/// Finetunes `pretrained` and a freshly initialised model of the same
/// configuration with identical data, seed and schedule.
pub fn compare_strategies(
    pretrained: ViPFormer<f32>,
    data: &FinetuneData<'_>,
    cfg: FinetuneConfig,
) -> Result<StrategyComparison> {
    let config = pretrained.config.clone();
    let pre = finetune(Some(pretrained), &config, data, cfg.clone())?;
    let scratch = finetune(None, &config, data, cfg)?;
    Ok(StrategyComparison {
        pretrained: pre,
        scratch,
    })
}
