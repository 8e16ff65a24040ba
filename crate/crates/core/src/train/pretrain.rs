use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{BestRecord, Checkpoint, EpochAccum, Progress};
use super::optim::{adamw_step, AdamWConfig, AdamWState};
use super::schedule::SchedulerState;
use crate::augment::{apply_augmentation, AugmentationSpec};
use crate::autodiff::Tape;
use crate::contrast::{combined_loss, CmcSource, ContrastConfig, LossParts};
use crate::data::{batch_indices, BatchMode, Sample};
use crate::error::{Error, Result};
use crate::eval::{extract_embeddings, linear_probe, EmbedOptions, ProbeConfig};
use crate::model::{GradMode, ParamStore, ViPFormer};
use crate::rng::{Purpose, RngStream};
use crate::tensor::Tensor;
use crate::tokenize::{ImagePatchSequence, PointPatchSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub contrast: ContrastConfig,
    pub augment: AugmentationSpec,
    pub optimizer: AdamWConfig,
    pub scheduler: SchedulerState,
    pub probe: ProbeConfig,
    pub embed: EmbedOptions,
    /// Probe every this many epochs (and always after the last); 0 disables.
    pub probe_every: usize,
    /// Prepare batch members one after another instead of in parallel.
    /// Results are identical either way; strict runs use this so the
    /// loading order is serial as well.
    pub serial_loading: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 32,
            seed: 0,
            contrast: ContrastConfig::default(),
            augment: AugmentationSpec::default(),
            optimizer: AdamWConfig::default(),
            scheduler: SchedulerState::default(),
            probe: ProbeConfig::default(),
            embed: EmbedOptions::default(),
            probe_every: 1,
            serial_loading: false,
        }
    }
}

/// Unlabelled training clouds plus the labelled splits used for model
/// selection (probe fitted on `probe_fit`, scored on `probe_eval`).
pub struct PretrainData<'a> {
    pub train: &'a [Sample],
    pub probe_fit: Vec<&'a Sample>,
    pub probe_eval: Vec<&'a Sample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: u64,
    pub imc: Option<f64>,
    pub cmc: Option<f64>,
    pub total: f64,
    pub lr: f64,
    pub probe_acc: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch\tL_imc\tL_cmc\tL_total\tlr\tprobe_acc";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{x}"))
}

impl EpochMetrics {
    /// Tab-separated row matching [`METRICS_HEADER`]; absent values are `nan`.
    pub fn tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.epoch,
            opt(self.imc),
            opt(self.cmc),
            self.total,
            self.lr,
            opt(self.probe_acc)
        )
    }
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub epoch: u64,
    pub step: u64,
    pub lr: f64,
    pub parts: LossParts,
    /// Present when this step completed an epoch.
    pub epoch_end: Option<EpochMetrics>,
    /// Whether the epoch end produced a new best probe score.
    pub improved: bool,
}

pub const STEPS_HEADER: &str = "epoch\tstep\tlr\tL_imc\tL_cmc\tL_total";

impl StepReport {
    /// One `steps.tsv` row; `epoch` and `step` are 1-based.
    pub fn tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.epoch + 1,
            self.step + 1,
            self.lr,
            opt(self.parts.imc),
            opt(self.parts.cmc),
            self.parts.total
        )
    }
}

struct Prepared {
    view1: PointPatchSequence<f32>,
    view2: Option<PointPatchSequence<f32>>,
    clean: Option<PointPatchSequence<f32>>,
    image: Option<ImagePatchSequence<f32>>,
}

/// Contrastive pretraining state machine. Every random draw is a function
/// of `(seed, epoch, step, sample index)`, so a run restored from a
/// checkpoint continues exactly as an uninterrupted one.
pub struct Pretrainer {
    pub model: ViPFormer<f32>,
    pub optimizer: AdamWState<f32>,
    pub cfg: PretrainConfig,
    pub progress: Progress,
    pub best: Option<BestRecord>,
    pub best_weights: Option<ParamStore<f32>>,
    pub log: Vec<EpochMetrics>,
    pub run: BTreeMap<String, String>,
}

impl Pretrainer {
    pub fn new(model: ViPFormer<f32>, cfg: PretrainConfig) -> Result<Self> {
        cfg.contrast.validate()?;
        cfg.augment.validate()?;
        cfg.optimizer.validate()?;
        cfg.scheduler.validate()?;
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

    /// Restores a pretraining checkpoint. Seed and scheduler come from the
    /// checkpoint; the remaining settings from `cfg`.
    pub fn resume(ckpt: Checkpoint, mut cfg: PretrainConfig) -> Result<Self> {
        if ckpt.stage != "pretrain" {
            return Err(Error::contract(format!(
                "cannot resume pretraining from a {} checkpoint",
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
            stage: "pretrain".into(),
            model: self.model.config.clone(),
            run: self.run.clone(),
            weights: self.model.weights.clone(),
            optimizer: Some(self.optimizer.clone()),
            scheduler: self.cfg.scheduler,
            progress: self.progress,
            best: self.best.clone(),
        }
    }

    /// The best-probe weights seen so far, as a checkpoint.
    pub fn best_checkpoint(&self) -> Option<Checkpoint> {
        self.best_weights.as_ref().map(|w| Checkpoint {
            weights: w.clone(),
            optimizer: None,
            ..self.checkpoint()
        })
    }

    pub fn finished(&self) -> bool {
        self.progress.epoch >= self.cfg.epochs as u64
    }

    fn steps_per_epoch(&self, n: usize) -> Result<usize> {
        let spe = n / self.cfg.batch_size.max(1);
        if self.cfg.batch_size == 0 || spe == 0 {
            return Err(Error::contract(format!(
                "batch size {} leaves no full batch in a split of {n} samples",
                self.cfg.batch_size
            )));
        }
        Ok(spe)
    }

    fn prepare(&self, sample: &Sample, index: usize, epoch: u64) -> Result<Prepared> {
        let root = RngStream::new(self.progress.seed);
        let mode = self.cfg.contrast.mode;
        let aug = root.substream(Purpose::Augment, epoch).child(index as u64);
        let fps = root.substream(Purpose::Sampling, epoch).child(index as u64);
        let tokens = |pts: &Tensor<f32>, label: u64| self.model.tokenize_points(pts, &mut fps.child(label));

        let v1 = apply_augmentation(&sample.points, &self.cfg.augment, &aug.child(1))?;
        let view1 = tokens(&v1, 1)?;
        let view2 = if mode.needs_second_view() {
            let v2 = apply_augmentation(&sample.points, &self.cfg.augment, &aug.child(2))?;
            Some(tokens(&v2, 2)?)
        } else {
            None
        };
        let (image, clean) = if mode.needs_image() {
            let mut pick = root.substream(Purpose::Pairing, epoch).child(index as u64);
            let paired = sample.pair::<f32>(&mut pick)?;
            let clean = match self.cfg.contrast.cmc_source {
                CmcSource::FirstView => None,
                CmcSource::Unaugmented => Some(tokens(&sample.points, 3)?),
            };
            (Some(self.model.tokenize_image(&paired.image)?), clean)
        } else {
            (None, None)
        };
        Ok(Prepared {
            view1,
            view2,
            clean,
            image,
        })
    }

    /// One optimizer step on the next batch; closes the epoch (metrics,
    /// probe, best tracking) when the batch was its last. On error the
    /// trainer is left as it was before the call.
    pub fn step(&mut self, data: &PretrainData<'_>) -> Result<StepReport> {
        if self.finished() {
            return Err(Error::contract("pretraining already completed all epochs"));
        }
        let spe = self.steps_per_epoch(data.train.len())?;
        let (epoch, step) = (self.progress.epoch, self.progress.step);
        let root = RngStream::new(self.progress.seed);
        let batches = batch_indices(
            data.train.len(),
            self.cfg.batch_size,
            BatchMode::Pretrain,
            Some(&mut root.substream(Purpose::Shuffle, epoch)),
        )?;
        let batch = &batches[step as usize];
        let prep = |&i: &usize| self.prepare(&data.train[i], i, epoch);
        let prepared = if self.cfg.serial_loading {
            batch.iter().map(prep).collect::<Result<Vec<_>>>()?
        } else {
            batch.par_iter().map(prep).collect::<Result<Vec<_>>>()?
        };
        let lr = self.cfg.scheduler.lr_for_step(epoch as usize, step as usize, spe);

        let mut view1 = Vec::with_capacity(batch.len());
        let mut view2 = Vec::new();
        let mut clean = Vec::new();
        let mut images = Vec::new();
        for p in prepared {
            view1.push(p.view1);
            view2.extend(p.view2);
            clean.extend(p.clean);
            images.extend(p.image);
        }

        let dropout = root.substream(Purpose::Dropout, self.progress.global_step);
        let mut tape = Tape::new();
        let (parts, grads, bn) = {
            let mut fwd = self.model.bind(&mut tape, true, GradMode::All);
            let p1 = fwd.forward_points(&view1, &mut dropout.child(1))?;
            let p2 = if view2.is_empty() {
                None
            } else {
                Some(fwd.forward_points(&view2, &mut dropout.child(2))?)
            };
            let f = if images.is_empty() {
                None
            } else {
                Some(fwd.forward_image(&images, &mut dropout.child(3))?)
            };
            let pc = if clean.is_empty() {
                None
            } else {
                Some(fwd.forward_points(&clean, &mut dropout.child(4))?)
            };
            let (loss, parts) = combined_loss(&mut *fwd.tape, p1, p2, f, pc, &self.cfg.contrast)?;
            if !parts.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {} at epoch {} step {step}",
                    parts.total,
                    epoch + 1
                )));
            }
            fwd.tape.backward(loss)?;
            (parts, fwd.grads(), fwd.into_bn_updates())
        };
        drop(tape);
        adamw_step(&mut self.model.weights, &grads, &mut self.optimizer, lr, &|_| true)?;
        self.model.apply_bn_updates(&bn);

        let acc = &mut self.progress.accum;
        acc.imc_sum += parts.imc.unwrap_or(0.0);
        acc.cmc_sum += parts.cmc.unwrap_or(0.0);
        acc.total_sum += parts.total;
        acc.steps += 1;
        acc.last_lr = lr;
        self.progress.step += 1;
        self.progress.global_step += 1;

        let mut report = StepReport {
            epoch,
            step,
            lr,
            parts,
            epoch_end: None,
            improved: false,
        };
        if self.progress.step as usize == spe {
            let (metrics, improved) = self.end_epoch(data)?;
            report.epoch_end = Some(metrics);
            report.improved = improved;
        }
        Ok(report)
    }

    fn end_epoch(&mut self, data: &PretrainData<'_>) -> Result<(EpochMetrics, bool)> {
        let acc: EpochAccum = self.progress.accum;
        let n = acc.steps.max(1) as f64;
        let mode = self.cfg.contrast.mode;
        let epoch = self.progress.epoch + 1;
        let last = epoch == self.cfg.epochs as u64;
        let due = self.cfg.probe_every > 0 && (epoch.is_multiple_of(self.cfg.probe_every as u64) || last);
        let probe_acc = if due && !data.probe_fit.is_empty() && !data.probe_eval.is_empty() {
            Some(self.probe(data)?)
        } else {
            None
        };
        let metrics = EpochMetrics {
            epoch,
            imc: mode.needs_second_view().then(|| acc.imc_sum / n),
            cmc: mode.needs_image().then(|| acc.cmc_sum / n),
            total: acc.total_sum / n,
            lr: acc.last_lr,
            probe_acc,
        };
        let improved = match (probe_acc, &self.best) {
            (Some(a), None) => Some(a),
            (Some(a), Some(b)) if a > b.value => Some(a),
            _ => None,
        };
        if let Some(value) = improved {
            self.best = Some(BestRecord {
                metric: "probe_acc".into(),
                value,
                epoch,
            });
            self.best_weights = Some(self.model.weights.clone());
        }
        self.log.push(metrics.clone());
        self.progress.epoch = epoch;
        self.progress.step = 0;
        self.progress.accum = EpochAccum::default();
        Ok((metrics, improved.is_some()))
    }

    /// Linear-probe accuracy of the current frozen features.
    pub fn probe(&self, data: &PretrainData<'_>) -> Result<f64> {
        let embed = |set: &[&Sample]| {
            let clouds: Vec<_> = set.iter().map(|s| &s.points).collect();
            extract_embeddings(&self.model, &clouds, &self.cfg.embed)
        };
        let labels = |set: &[&Sample]| set.iter().map(|s| s.class_id).collect::<Vec<_>>();
        let fit = embed(&data.probe_fit)?;
        let eval = embed(&data.probe_eval)?;
        linear_probe(
            &fit,
            &labels(&data.probe_fit),
            &eval,
            &labels(&data.probe_eval),
            &self.cfg.probe,
        )
    }

    /// Runs until all epochs are done or `max_steps` more steps were taken,
    /// calling `on_step` after each.
    pub fn run(
        &mut self,
        data: &PretrainData<'_>,
        max_steps: Option<u64>,
        on_step: &mut dyn FnMut(&Self, &StepReport) -> Result<()>,
    ) -> Result<()> {
        let mut taken = 0;
        while !self.finished() && max_steps.is_none_or(|m| taken < m) {
            let report = self.step(data)?;
            taken += 1;
            on_step(self, &report)?;
        }
        Ok(())
    }
}

/// Result of a complete pretraining run.
pub struct PretrainOutcome {
    pub last: Checkpoint,
    pub best: Option<Checkpoint>,
    pub log: Vec<EpochMetrics>,
}

/// Pretrains `model` for `cfg.epochs` epochs. With zero epochs the
/// initialised model is returned untouched.
pub fn pretrain(model: ViPFormer<f32>, data: &PretrainData<'_>, cfg: PretrainConfig) -> Result<PretrainOutcome> {
    let mut t = Pretrainer::new(model, cfg)?;
    t.run(data, None, &mut |_, _| Ok(()))?;
    Ok(PretrainOutcome {
        last: t.checkpoint(),
        best: t.best_checkpoint(),
        log: t.log,
    })
}
