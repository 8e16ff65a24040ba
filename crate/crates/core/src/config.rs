//! Plain-text `key = value` run configuration.
//!
//! Every tunable of a run lives in [`RunConfig`]. A file sets any subset of
//! keys (`#` starts a comment), later assignments and command-line
//! overrides win, and unknown keys are rejected. [`RunConfig::to_text`]
//! emits every key, so the echoed file reproduces the run on its own.

use std::path::{Path, PathBuf};

use crate::augment::{AugmentationSpec, RotationAxis};
use crate::contrast::{CmcSource, ContrastMode};
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::eval::{FeatureSource, FewShotSpec, ProbeLoss};
use crate::model::ViPFormerConfig;
use crate::train::{AdamWConfig, FinetuneConfig, PretrainConfig, SchedulerState};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ViPFormerConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub fewshot: FewShotSpec,
    pub synthetic: SyntheticSpec,
    /// Dataset root (directory holding `manifest.json`).
    pub data_root: Option<PathBuf>,
    /// Subsample clouds to this many points on load (0 keeps all).
    pub sample_size: usize,
    pub strict_deterministic: bool,
    /// Worker threads (0 = one per core).
    pub workers: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ViPFormerConfig::table_i(),
            pretrain: PretrainConfig {
                epochs: 30,
                ..Default::default()
            },
            finetune: FinetuneConfig::default(),
            fewshot: FewShotSpec::default(),
            synthetic: SyntheticSpec::default(),
            data_root: None,
            sample_size: 0,
            strict_deterministic: false,
            workers: 0,
            out_dir: PathBuf::from("runs"),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::param(format!("{key}: cannot parse {v:?} as a number")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::param(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn schedule_get(s: &SchedulerState, field: &str) -> Option<String> {
    Some(match field {
        "peak" => s.base_peak.to_string(),
        "peak_decay" => s.peak_decay.to_string(),
        "cycle" => s.cycle_len.to_string(),
        "warmup" => s.warmup_len.to_string(),
        "per_step" => s.per_step.to_string(),
        _ => return None,
    })
}

fn schedule_set(s: &mut SchedulerState, key: &str, field: &str, v: &str) -> Result<bool> {
    match field {
        "peak" => s.base_peak = num(key, v)?,
        "peak_decay" => s.peak_decay = num(key, v)?,
        "cycle" => s.cycle_len = num(key, v)?,
        "warmup" => s.warmup_len = num(key, v)?,
        "per_step" => s.per_step = flag(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn optim_get(o: &AdamWConfig, field: &str) -> Option<String> {
    Some(match field {
        "beta1" => o.beta1.to_string(),
        "beta2" => o.beta2.to_string(),
        "eps" => o.eps.to_string(),
        "weight_decay" => o.weight_decay.to_string(),
        _ => return None,
    })
}

fn optim_set(o: &mut AdamWConfig, key: &str, field: &str, v: &str) -> Result<bool> {
    match field {
        "beta1" => o.beta1 = num(key, v)?,
        "beta2" => o.beta2 = num(key, v)?,
        "eps" => o.eps = num(key, v)?,
        "weight_decay" => o.weight_decay = num(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn augment_get(a: &AugmentationSpec, field: &str) -> Option<String> {
    Some(match field {
        "rotation_axis" => match a.rotation_axis {
            RotationAxis::Up => "up".into(),
            RotationAxis::Arbitrary => "arbitrary".into(),
        },
        "rotation_min" => a.rotation_range.0.to_string(),
        "rotation_max" => a.rotation_range.1.to_string(),
        "translation_min" => a.translation_range.0.to_string(),
        "translation_max" => a.translation_range.1.to_string(),
        "jitter_sigma" => a.jitter_sigma.to_string(),
        "jitter_clip" => a.jitter_clip.to_string(),
        "scale_min" => a.scale_range.0.to_string(),
        "scale_max" => a.scale_range.1.to_string(),
        _ => return None,
    })
}

fn augment_set(a: &mut AugmentationSpec, key: &str, field: &str, v: &str) -> Result<bool> {
    match field {
        "rotation_axis" => {
            a.rotation_axis = match v {
                "up" => RotationAxis::Up,
                "arbitrary" => RotationAxis::Arbitrary,
                _ => return Err(Error::param(format!("{key}: expected up or arbitrary, got {v:?}"))),
            }
        }
        "rotation_min" => a.rotation_range.0 = num(key, v)?,
        "rotation_max" => a.rotation_range.1 = num(key, v)?,
        "translation_min" => a.translation_range.0 = num(key, v)?,
        "translation_max" => a.translation_range.1 = num(key, v)?,
        "jitter_sigma" => a.jitter_sigma = num(key, v)?,
        "jitter_clip" => a.jitter_clip = num(key, v)?,
        "scale_min" => a.scale_range.0 = num(key, v)?,
        "scale_max" => a.scale_range.1 = num(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Every key, in emission order.
const KEYS: &[&str] = &[
    "model.layers",
    "model.heads",
    "model.dim",
    "model.mlp_ratio",
    "model.length",
    "model.neighbors",
    "model.patch",
    "model.image_height",
    "model.image_width",
    "model.image_channels",
    "model.point_channels",
    "model.point_hidden",
    "model.dropout",
    "model.out_dim",
    "contrast.mode",
    "contrast.tau",
    "contrast.alpha",
    "contrast.cmc_source",
    "augment.rotation_axis",
    "augment.rotation_min",
    "augment.rotation_max",
    "augment.translation_min",
    "augment.translation_max",
    "augment.jitter_sigma",
    "augment.jitter_clip",
    "augment.scale_min",
    "augment.scale_max",
    "pretrain.epochs",
    "pretrain.batch_size",
    "pretrain.probe_every",
    "optim.beta1",
    "optim.beta2",
    "optim.eps",
    "optim.weight_decay",
    "schedule.peak",
    "schedule.peak_decay",
    "schedule.cycle",
    "schedule.warmup",
    "schedule.per_step",
    "probe.loss",
    "probe.weight_decay",
    "probe.learning_rate",
    "probe.iterations",
    "embed.source",
    "embed.batch_size",
    "finetune.epochs",
    "finetune.batch_size",
    "finetune.freeze_encoder",
    "finetune.optim.beta1",
    "finetune.optim.beta2",
    "finetune.optim.eps",
    "finetune.optim.weight_decay",
    "finetune.schedule.peak",
    "finetune.schedule.peak_decay",
    "finetune.schedule.cycle",
    "finetune.schedule.warmup",
    "finetune.schedule.per_step",
    "finetune.augment.rotation_axis",
    "finetune.augment.rotation_min",
    "finetune.augment.rotation_max",
    "finetune.augment.translation_min",
    "finetune.augment.translation_max",
    "finetune.augment.jitter_sigma",
    "finetune.augment.jitter_clip",
    "finetune.augment.scale_min",
    "finetune.augment.scale_max",
    "fewshot.way",
    "fewshot.shot",
    "fewshot.runs",
    "fewshot.queries",
    "synthetic.classes",
    "synthetic.per_class",
    "synthetic.points",
    "synthetic.image_size",
    "synthetic.views",
    "synthetic.elevation",
    "data.root",
    "data.sample_size",
    "run.seed",
    "run.eval_seed",
    "run.strict_deterministic",
    "run.workers",
    "run.out_dir",
];

impl RunConfig {
    /// Seed shared by pretraining and finetuning.
    pub fn seed(&self) -> u64 {
        self.pretrain.seed
    }

    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    /// Current value of `key` in its textual form.
    pub fn get(&self, key: &str) -> Result<String> {
        let m = &self.model;
        let p = &self.pretrain;
        let f = &self.finetune;
        let s = &self.synthetic;
        let unknown = || Error::param(format!("unknown configuration key {key:?}"));
        let v = match key {
            "model.layers" => m.layers.to_string(),
            "model.heads" => m.heads.to_string(),
            "model.dim" => m.dim.to_string(),
            "model.mlp_ratio" => m.mlp_ratio.to_string(),
            "model.length" => m.length.to_string(),
            "model.neighbors" => m.neighbors.to_string(),
            "model.patch" => m.patch.to_string(),
            "model.image_height" => m.image_height.to_string(),
            "model.image_width" => m.image_width.to_string(),
            "model.image_channels" => m.image_channels.to_string(),
            "model.point_channels" => m.point_channels.to_string(),
            "model.point_hidden" => m.point_hidden.to_string(),
            "model.dropout" => m.dropout.to_string(),
            "model.out_dim" => m.out_dim.to_string(),
            "contrast.mode" => p.contrast.mode.to_string(),
            "contrast.tau" => p.contrast.tau.to_string(),
            "contrast.alpha" => p.contrast.alpha.to_string(),
            "contrast.cmc_source" => match p.contrast.cmc_source {
                CmcSource::FirstView => "first_view".into(),
                CmcSource::Unaugmented => "unaugmented".into(),
            },
            "pretrain.epochs" => p.epochs.to_string(),
            "pretrain.batch_size" => p.batch_size.to_string(),
            "pretrain.probe_every" => p.probe_every.to_string(),
            "probe.loss" => match p.probe.loss {
                ProbeLoss::Softmax => "softmax".into(),
                ProbeLoss::Hinge => "hinge".into(),
            },
            "probe.weight_decay" => p.probe.weight_decay.to_string(),
            "probe.learning_rate" => p.probe.learning_rate.to_string(),
            "probe.iterations" => p.probe.iterations.to_string(),
            "embed.source" => match p.embed.source {
                FeatureSource::Adapter => "adapter".into(),
                FeatureSource::Pooled => "pooled".into(),
            },
            "embed.batch_size" => p.embed.batch_size.to_string(),
            "finetune.epochs" => f.epochs.to_string(),
            "finetune.batch_size" => f.batch_size.to_string(),
            "finetune.freeze_encoder" => f.freeze_encoder.to_string(),
            "fewshot.way" => self.fewshot.n_way.to_string(),
            "fewshot.shot" => self.fewshot.k_shot.to_string(),
            "fewshot.runs" => self.fewshot.runs.to_string(),
            "fewshot.queries" => self.fewshot.query_per_class.to_string(),
            "synthetic.classes" => s.class_count.to_string(),
            "synthetic.per_class" => s.per_class.to_string(),
            "synthetic.points" => s.n_points.to_string(),
            "synthetic.image_size" => s.image_size.to_string(),
            "synthetic.views" => s.views.to_string(),
            "synthetic.elevation" => s.elevation.to_string(),
            "data.root" => self
                .data_root
                .as_ref()
                .map_or_else(String::new, |r| r.display().to_string()),
            "data.sample_size" => self.sample_size.to_string(),
            "run.seed" => p.seed.to_string(),
            "run.eval_seed" => p.embed.eval_seed.to_string(),
            "run.strict_deterministic" => self.strict_deterministic.to_string(),
            "run.workers" => self.workers.to_string(),
            "run.out_dir" => self.out_dir.display().to_string(),
            _ => {
                let found = if let Some(field) = key.strip_prefix("finetune.optim.") {
                    optim_get(&f.optimizer, field)
                } else if let Some(field) = key.strip_prefix("finetune.schedule.") {
                    schedule_get(&f.scheduler, field)
                } else if let Some(field) = key.strip_prefix("finetune.augment.") {
                    augment_get(&f.augment, field)
                } else if let Some(field) = key.strip_prefix("optim.") {
                    optim_get(&p.optimizer, field)
                } else if let Some(field) = key.strip_prefix("schedule.") {
                    schedule_get(&p.scheduler, field)
                } else if let Some(field) = key.strip_prefix("augment.") {
                    augment_get(&p.augment, field)
                } else {
                    None
                };
                found.ok_or_else(unknown)?
            }
        };
        Ok(v)
    }

    /// Assigns one key; unknown keys and unparsable values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let p = &mut self.pretrain;
        let f = &mut self.finetune;
        let s = &mut self.synthetic;
        match key {
            "model.layers" => m.layers = num(key, v)?,
            "model.heads" => m.heads = num(key, v)?,
            "model.dim" => m.dim = num(key, v)?,
            "model.mlp_ratio" => m.mlp_ratio = num(key, v)?,
            "model.length" => m.length = num(key, v)?,
            "model.neighbors" => m.neighbors = num(key, v)?,
            "model.patch" => m.patch = num(key, v)?,
            "model.image_height" => m.image_height = num(key, v)?,
            "model.image_width" => m.image_width = num(key, v)?,
            "model.image_channels" => m.image_channels = num(key, v)?,
            "model.point_channels" => m.point_channels = num(key, v)?,
            "model.point_hidden" => m.point_hidden = num(key, v)?,
            "model.dropout" => m.dropout = num(key, v)?,
            "model.out_dim" => m.out_dim = num(key, v)?,
            "contrast.mode" => p.contrast.mode = v.parse::<ContrastMode>()?,
            "contrast.tau" => p.contrast.tau = num(key, v)?,
            "contrast.alpha" => p.contrast.alpha = num(key, v)?,
            "contrast.cmc_source" => {
                p.contrast.cmc_source = match v {
                    "first_view" => CmcSource::FirstView,
                    "unaugmented" => CmcSource::Unaugmented,
                    _ => {
                        return Err(Error::param(format!(
                            "{key}: expected first_view or unaugmented, got {v:?}"
                        )))
                    }
                }
            }
            "pretrain.epochs" => p.epochs = num(key, v)?,
            "pretrain.batch_size" => p.batch_size = num(key, v)?,
            "pretrain.probe_every" => p.probe_every = num(key, v)?,
            "probe.loss" => {
                p.probe.loss = match v {
                    "softmax" => ProbeLoss::Softmax,
                    "hinge" => ProbeLoss::Hinge,
                    _ => return Err(Error::param(format!("{key}: expected softmax or hinge, got {v:?}"))),
                }
            }
            "probe.weight_decay" => p.probe.weight_decay = num(key, v)?,
            "probe.learning_rate" => p.probe.learning_rate = num(key, v)?,
            "probe.iterations" => p.probe.iterations = num(key, v)?,
            "embed.source" => {
                p.embed.source = match v {
                    "adapter" => FeatureSource::Adapter,
                    "pooled" => FeatureSource::Pooled,
                    _ => return Err(Error::param(format!("{key}: expected adapter or pooled, got {v:?}"))),
                }
            }
            "embed.batch_size" => p.embed.batch_size = num(key, v)?,
            "finetune.epochs" => f.epochs = num(key, v)?,
            "finetune.batch_size" => f.batch_size = num(key, v)?,
            "finetune.freeze_encoder" => f.freeze_encoder = flag(key, v)?,
            "fewshot.way" => self.fewshot.n_way = num(key, v)?,
            "fewshot.shot" => self.fewshot.k_shot = num(key, v)?,
            "fewshot.runs" => self.fewshot.runs = num(key, v)?,
            "fewshot.queries" => self.fewshot.query_per_class = num(key, v)?,
            "synthetic.classes" => s.class_count = num(key, v)?,
            "synthetic.per_class" => s.per_class = num(key, v)?,
            "synthetic.points" => s.n_points = num(key, v)?,
            "synthetic.image_size" => s.image_size = num(key, v)?,
            "synthetic.views" => s.views = num(key, v)?,
            "synthetic.elevation" => s.elevation = num(key, v)?,
            "data.root" => self.data_root = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.sample_size" => self.sample_size = num(key, v)?,
            "run.seed" => {
                let seed = num(key, v)?;
                p.seed = seed;
                f.seed = seed;
            }
            "run.eval_seed" => {
                let seed = num(key, v)?;
                p.embed.eval_seed = seed;
                f.eval_seed = seed;
            }
            "run.strict_deterministic" => self.strict_deterministic = flag(key, v)?,
            "run.workers" => self.workers = num(key, v)?,
            "run.out_dir" => self.out_dir = PathBuf::from(v),
            _ => {
                let known = if let Some(field) = key.strip_prefix("finetune.optim.") {
                    optim_set(&mut f.optimizer, key, field, v)?
                } else if let Some(field) = key.strip_prefix("finetune.schedule.") {
                    schedule_set(&mut f.scheduler, key, field, v)?
                } else if let Some(field) = key.strip_prefix("finetune.augment.") {
                    augment_set(&mut f.augment, key, field, v)?
                } else if let Some(field) = key.strip_prefix("optim.") {
                    optim_set(&mut p.optimizer, key, field, v)?
                } else if let Some(field) = key.strip_prefix("schedule.") {
                    schedule_set(&mut p.scheduler, key, field, v)?
                } else if let Some(field) = key.strip_prefix("augment.") {
                    augment_set(&mut p.augment, key, field, v)?
                } else {
                    false
                };
                if !known {
                    return Err(Error::param(format!("unknown configuration key {key:?}")));
                }
            }
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            self.set(key.trim(), value).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_text(&text)
    }

    /// Applies `key=value` overrides, e.g. from the command line.
    pub fn apply_overrides<'a>(&mut self, overrides: impl IntoIterator<Item = (&'a str, String)>) -> Result<()> {
        for (k, v) in overrides {
            self.set(k, &v)?;
        }
        Ok(())
    }

    /// Every key with its resolved value, one per line.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("every listed key resolves")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.contrast.validate()?;
        self.pretrain.augment.validate()?;
        self.pretrain.optimizer.validate()?;
        self.pretrain.scheduler.validate()?;
        self.finetune.augment.validate()?;
        self.finetune.optimizer.validate()?;
        self.finetune.scheduler.validate()?;
        self.synthetic.validate()?;
        if self.pretrain.batch_size == 0 || self.finetune.batch_size == 0 || self.pretrain.embed.batch_size == 0 {
            return Err(Error::param("batch sizes must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn emitted_text_round_trips() {
        let mut c = RunConfig::default();
        c.set("contrast.mode", "cmc").unwrap();
        c.set("finetune.schedule.peak", "0.0002").unwrap();
        c.set("augment.rotation_axis", "arbitrary").unwrap();
        c.set("data.root", "/tmp/x").unwrap();
        c.set("run.seed", "17").unwrap();
        let back = RunConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), c.to_text());
        assert_eq!(back.finetune.seed, 17);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let err = RunConfig::from_text("model.layers = 3\nmodel.bogus = 1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(RunConfig::from_text("contrast.tau = fast").is_err());
        assert!(RunConfig::from_text("no equals sign").is_err());
        assert!(RunConfig::default().set("schedule.bogus", "1").is_err());
    }

    #[test]
    fn later_assignments_and_overrides_win() {
        let mut c = RunConfig::from_text("# preset\ncontrast.alpha = 0.5\ncontrast.alpha = 0.25 # again\n").unwrap();
        assert_eq!(c.pretrain.contrast.alpha, 0.25);
        c.apply_overrides([("contrast.alpha", "0".to_string())]).unwrap();
        assert_eq!(c.pretrain.contrast.alpha, 0.0);
    }

    #[test]
    fn every_key_is_settable_with_its_own_value() {
        let c = RunConfig::default();
        for k in KEYS {
            let mut d = c.clone();
            d.set(k, &c.get(k).unwrap()).unwrap();
            assert_eq!(d, c, "{k}");
        }
    }
}
