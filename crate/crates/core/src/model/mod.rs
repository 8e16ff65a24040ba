//! The shared-encoder transformer over image and point-cloud tokens.

pub mod config;
pub mod forward;
pub mod weights;

pub use config::{count_parameters, ViPFormerConfig};
pub use forward::{Forward, GradMode};
pub use weights::{init_classifier_head, init_weights, Param, ParamKind, ParamStore};

use crate::augment::resize_bilinear;
use crate::autodiff::{BatchStats, Tape};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::tokenize::{build_point_patches, patchify_image, ImagePatchSequence, PointPatchSequence};

/// Running-statistic momentum of the output adapter's batch norms.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct ViPFormer<T: Real> {
    pub config: ViPFormerConfig,
    pub weights: ParamStore<T>,
}

impl<T: Real> ViPFormer<T> {
    pub fn new(config: ViPFormerConfig, rng: &RngStream) -> Result<Self> {
        let weights = init_weights(&config, rng)?;
        Ok(Self { config, weights })
    }

    /// Wraps existing weights after checking that every tensor the config
    /// requires is present with the right shape.
    pub fn from_parts(config: ViPFormerConfig, weights: ParamStore<T>) -> Result<Self> {
        let reference = init_weights::<T>(&config, &RngStream::new(0))?;
        for p in reference.iter() {
            match weights.get(&p.name) {
                None => return Err(Error::shape(format!("missing weight {}", p.name))),
                Some(t) if t.shape() != p.value.shape() => {
                    return Err(Error::shape(format!(
                        "weight {} has shape {:?}, config requires {:?}",
                        p.name,
                        t.shape(),
                        p.value.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(Self { config, weights })
    }

    pub fn num_parameters(&self) -> usize {
        self.weights
            .iter()
            .filter(|p| p.kind == ParamKind::Learnable && !p.name.starts_with("head."))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.weights.get("head.fc2.bias").map(|b| b.numel())
    }

    pub fn add_classifier(&mut self, num_classes: usize, rng: &RngStream) -> Result<()> {
        init_classifier_head(&mut self.weights, &self.config, num_classes, rng)
    }

    /// Starts a forward pass recorded on `tape`.
    pub fn bind<'a>(&'a self, tape: &'a mut Tape<T>, train: bool, grad: GradMode) -> Forward<'a, T> {
        Forward::new(self, tape, train, grad)
    }

    /// Exponential running-average update (`momentum` 0.1) of batch-norm
    /// statistics collected by a training-mode pass.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchStats<T>)]) {
        let m = T::lit(BN_MOMENTUM);
        let keep = T::one() - m;
        for (prefix, stats) in updates {
            for (suffix, values) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
                if let Some(t) = self.weights.get_mut(&format!("{prefix}.{suffix}")) {
                    for (r, &v) in t.data_mut().iter_mut().zip(values.iter()) {
                        *r = keep * *r + m * v;
                    }
                }
            }
            if let Some(t) = self.weights.get_mut(&format!("{prefix}.updates")) {
                t.data_mut()[0] = t.data()[0] + T::one();
            }
        }
    }

    /// Whether the output adapter can run in evaluation mode.
    pub fn bn_initialised(&self) -> bool {
        ["output_adapter.bn1", "output_adapter.bn2"].iter().all(|p| {
            self.weights
                .get(&format!("{p}.updates"))
                .is_some_and(|t| t.data()[0] > T::zero())
        })
    }

    /// Sets batch-norm running statistics to the average of the batch
    /// statistics over `batches`, using training-mode passes without dropout.
    pub fn calibrate_batch_norm(&mut self, batches: &[Vec<PointPatchSequence<T>>]) -> Result<()> {
        if batches.is_empty() {
            return Err(Error::param("calibration needs at least one batch"));
        }
        let mut sums: Vec<(String, BatchStats<T>)> = Vec::new();
        let mut inert = self.clone();
        inert.config.dropout = 0.0;
        for batch in batches {
            let mut tape = Tape::new();
            let mut rng = RngStream::new(0);
            let mut fwd = inert.bind(&mut tape, true, GradMode::None);
            fwd.forward_points(batch, &mut rng)?;
            let ups = fwd.into_bn_updates();
            if sums.is_empty() {
                sums = ups;
            } else {
                for ((_, acc), (_, s)) in sums.iter_mut().zip(ups) {
                    acc.mean.iter_mut().zip(&s.mean).for_each(|(a, &b)| *a = *a + b);
                    acc.var.iter_mut().zip(&s.var).for_each(|(a, &b)| *a = *a + b);
                }
            }
        }
        let n = T::lit(batches.len() as f64);
        for (prefix, stats) in sums {
            for (suffix, values) in [("running_mean", stats.mean), ("running_var", stats.var)] {
                let t = self
                    .weights
                    .get_mut(&format!("{prefix}.{suffix}"))
                    .ok_or_else(|| Error::contract(format!("{prefix} has no running statistics")))?;
                t.data_mut()
                    .iter_mut()
                    .zip(values)
                    .for_each(|(r, v)| *r = v / n);
            }
            if let Some(t) = self.weights.get_mut(&format!("{prefix}.updates")) {
                t.data_mut()[0] = t.data()[0] + n;
            }
        }
        Ok(())
    }

    /// FPS + kNN tokenisation with the configured `G` and `k`.
    pub fn tokenize_points(&self, points: &Tensor<T>, rng: &mut RngStream) -> Result<PointPatchSequence<T>> {
        if points.ndim() != 2 || points.shape()[1] != self.config.point_channels {
            return Err(Error::shape(format!(
                "point cloud must be [N, {}], got {:?}",
                self.config.point_channels,
                points.shape()
            )));
        }
        build_point_patches(points, self.config.length, self.config.neighbors, rng)
    }

    /// Resizes (if needed) and patchifies an `[H, W, C]` image.
    pub fn tokenize_image(&self, image: &Tensor<T>) -> Result<ImagePatchSequence<T>> {
        let c = &self.config;
        let s = image.shape();
        if s.len() != 3 || s[2] != c.image_channels {
            return Err(Error::shape(format!(
                "image must be [H, W, {}], got {s:?}",
                c.image_channels
            )));
        }
        if s[0] == c.image_height && s[1] == c.image_width {
            patchify_image(image, c.patch)
        } else {
            patchify_image(&resize_bilinear(image, c.image_height, c.image_width)?, c.patch)
        }
    }
}
