//! Stochastic point-cloud views for the intra-modal objective, plus the
//! small image preparation step (resize, optional mirror).

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{Purpose, RngStream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RotationAxis {
    /// Rotation about the vertical (y) axis.
    Up,
    /// Rotation about a uniformly random unit axis.
    Arbitrary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub rotation_axis: RotationAxis,
    /// Radians, `[lo, hi)`.
    pub rotation_range: (f64, f64),
    /// Per-axis offset interval.
    pub translation_range: (f64, f64),
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
    pub scale_range: (f64, f64),
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            rotation_axis: RotationAxis::Up,
            rotation_range: (0.0, TAU),
            translation_range: (-0.2, 0.2),
            jitter_sigma: 0.01,
            jitter_clip: 0.05,
            scale_range: (0.8, 1.2),
        }
    }
}

impl AugmentationSpec {
    /// Spec under which every view equals its input.
    pub fn identity() -> Self {
        Self {
            rotation_axis: RotationAxis::Up,
            rotation_range: (0.0, 0.0),
            translation_range: (0.0, 0.0),
            jitter_sigma: 0.0,
            jitter_clip: 0.0,
            scale_range: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let interval = |name: &str, (lo, hi): (f64, f64)| -> Result<()> {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(Error::param(format!("{name} range [{lo}, {hi}] is invalid")));
            }
            Ok(())
        };
        interval("rotation", self.rotation_range)?;
        interval("translation", self.translation_range)?;
        interval("scale", self.scale_range)?;
        if self.scale_range.0 <= 0.0 {
            return Err(Error::param("scale range bounds must be positive"));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(Error::param("jitter sigma must be finite and >= 0"));
        }
        if !(self.jitter_clip >= 0.0 && self.jitter_clip.is_finite()) {
            return Err(Error::param("jitter clip must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Scale, rotation, translation and clipped Gaussian jitter, in that order.
/// Each stage draws from its own substream of `rng`; degenerate stages are
/// skipped so that the identity spec reproduces the input bit-for-bit.
pub fn apply_augmentation<T: Real>(
    points: &Tensor<T>,
    spec: &AugmentationSpec,
    rng: &RngStream,
) -> Result<Tensor<T>> {
    spec.validate()?;
    if points.ndim() != 2 || points.shape()[1] != 3 {
        return Err(Error::shape(format!(
            "augmentation expects [N, 3] points, got {:?}",
            points.shape()
        )));
    }
    let mut out = points.clone();
    let data = out.data_mut();

    let (slo, shi) = spec.scale_range;
    if !(slo == 1.0 && shi == 1.0) {
        let s = T::lit(rng.substream(Purpose::Augment, 0).uniform_in(slo, shi));
        data.iter_mut().for_each(|v| *v = *v * s);
    }

    let (rlo, rhi) = spec.rotation_range;
    if !(rlo == 0.0 && rhi == 0.0) {
        let mut r = rng.substream(Purpose::Augment, 1);
        let angle = r.uniform_in(rlo, rhi);
        let axis = match spec.rotation_axis {
            RotationAxis::Up => [0.0, 1.0, 0.0],
            RotationAxis::Arbitrary => random_unit_vector(&mut r),
        };
        let m = rotation_matrix(axis, angle);
        for p in data.chunks_mut(3) {
            let v = [p[0].as_f64(), p[1].as_f64(), p[2].as_f64()];
            for (row, slot) in m.iter().zip(p.iter_mut()) {
                *slot = T::lit(row[0] * v[0] + row[1] * v[1] + row[2] * v[2]);
            }
        }
    }

    let (tlo, thi) = spec.translation_range;
    if !(tlo == 0.0 && thi == 0.0) {
        let mut r = rng.substream(Purpose::Augment, 2);
        let offset = [
            T::lit(r.uniform_in(tlo, thi)),
            T::lit(r.uniform_in(tlo, thi)),
            T::lit(r.uniform_in(tlo, thi)),
        ];
        for p in data.chunks_mut(3) {
            p.iter_mut().zip(&offset).for_each(|(v, &o)| *v = *v + o);
        }
    }

    if spec.jitter_sigma > 0.0 {
        let mut r = rng.substream(Purpose::Augment, 3);
        let clip = spec.jitter_clip;
        for v in data.iter_mut() {
            let noise = (r.normal() * spec.jitter_sigma).clamp(-clip, clip);
            *v = *v + T::lit(noise);
        }
    }
    Ok(out)
}

/// Two independent augmented views drawn from disjoint substreams.
pub fn two_views<T: Real>(
    points: &Tensor<T>,
    spec: &AugmentationSpec,
    rng: &RngStream,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let a = apply_augmentation(points, spec, &rng.child(1))?;
    let b = apply_augmentation(points, spec, &rng.child(2))?;
    Ok((a, b))
}

fn random_unit_vector(rng: &mut RngStream) -> [f64; 3] {
    loop {
        let v = [rng.normal(), rng.normal(), rng.normal()];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Rodrigues rotation matrix for a unit `axis`.
pub fn rotation_matrix(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    let [x, y, z] = axis;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

/// Bilinear resize of an `[H, W, C]` image (pixel-center aligned).
pub fn resize_bilinear<T: Real>(image: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 || h == 0 || w == 0 {
        return Err(Error::shape(format!("cannot resize {s:?} to {h}x{w}")));
    }
    let (sh, sw, c) = (s[0], s[1], s[2]);
    if sh == h && sw == w {
        return Ok(image.clone());
    }
    let src = image.data();
    let sample = |pos: f64, len: usize| -> (usize, usize, f64) {
        let p = pos.clamp(0.0, (len - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, p - i0 as f64)
    };
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        let (y0, y1, fy) = sample((y as f64 + 0.5) * sh as f64 / h as f64 - 0.5, sh);
        for x in 0..w {
            let (x0, x1, fx) = sample((x as f64 + 0.5) * sw as f64 / w as f64 - 0.5, sw);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| src[(yy * sw + xx) * c + ch].as_f64();
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(T::lit(top * (1.0 - fy) + bottom * fy));
            }
        }
    }
    Tensor::from_vec(&[h, w, c], out)
}

pub fn flip_horizontal<T: Real>(image: &Tensor<T>) -> Tensor<T> {
    let s = image.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in (0..w).rev() {
            out.extend_from_slice(&src[(y * w + x) * c..(y * w + x + 1) * c]);
        }
    }
    Tensor::from_vec(s, out).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(n: usize, seed: u64) -> Tensor<f64> {
        let mut r = RngStream::new(seed);
        Tensor::from_vec(&[n, 3], (0..n * 3).map(|_| r.uniform_in(-1.0, 1.0)).collect()).unwrap()
    }

    fn pairwise(t: &Tensor<f64>) -> Vec<f64> {
        let n = t.shape()[0];
        let mut d = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = (t.row(i), t.row(j));
                d.push(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt());
            }
        }
        d
    }

    #[test]
    fn identity_spec_is_bit_exact() {
        let mut p = cloud(64, 1);
        p.data_mut()[0] = -0.0;
        let out = apply_augmentation(&p, &AugmentationSpec::identity(), &RngStream::new(9)).unwrap();
        let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&out), bits(&p));
        let (a, b) = two_views(&p, &AugmentationSpec::identity(), &RngStream::new(3)).unwrap();
        assert_eq!(bits(&a), bits(&p));
        assert_eq!(bits(&b), bits(&p));
    }

    #[test]
    fn rotations_are_isometries() {
        let p = cloud(40, 2);
        for axis in [RotationAxis::Up, RotationAxis::Arbitrary] {
            let spec = AugmentationSpec {
                rotation_axis: axis,
                rotation_range: (0.0, TAU),
                ..AugmentationSpec::identity()
            };
            for seed in 0..10 {
                let out = apply_augmentation(&p, &spec, &RngStream::new(seed)).unwrap();
                assert!(out.max_abs_diff(&p) > 1e-6);
                for (a, b) in pairwise(&p).iter().zip(pairwise(&out)) {
                    assert!((a - b).abs() <= 1e-5 * a.max(1e-12), "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn jitter_is_clipped_and_has_expected_spread() {
        let spec = AugmentationSpec {
            jitter_sigma: 0.01,
            jitter_clip: 0.05,
            ..AugmentationSpec::identity()
        };
        let p = Tensor::<f64>::zeros(&[33_334, 3]);
        let out = apply_augmentation(&p, &spec, &RngStream::new(5)).unwrap();
        let d = out.data();
        assert!(d.iter().all(|v| v.abs() <= 0.05));
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let std = (d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        assert!((std - 0.01).abs() < 0.002, "std {std}");

        let tight = AugmentationSpec {
            jitter_sigma: 0.05,
            jitter_clip: 0.01,
            ..spec
        };
        let out = apply_augmentation(&p, &tight, &RngStream::new(6)).unwrap();
        assert!(out.data().iter().all(|v| v.abs() <= 0.01));
    }

    #[test]
    fn views_are_reproducible_and_distinct() {
        let p = cloud(32, 4);
        let spec = AugmentationSpec::default();
        let (a1, b1) = two_views(&p, &spec, &RngStream::new(11)).unwrap();
        let (a2, b2) = two_views(&p, &spec, &RngStream::new(11)).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        let distinct = (0..1000)
            .filter(|&s| {
                let (a, b) = two_views(&p, &spec, &RngStream::new(s)).unwrap();
                a != b
            })
            .count();
        assert_eq!(distinct, 1000);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = AugmentationSpec::default();
        spec.scale_range = (0.0, 1.0);
        assert!(matches!(spec.validate(), Err(Error::Parameter(_))));
        spec = AugmentationSpec::default();
        spec.jitter_clip = -1.0;
        assert!(spec.validate().is_err());
        spec = AugmentationSpec::default();
        spec.translation_range = (0.3, -0.3);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn resize_identity_and_flip() {
        let img = Tensor::<f64>::from_f64(&[1, 3, 1], &[1., 2., 3.]).unwrap();
        assert_eq!(resize_bilinear(&img, 1, 3).unwrap(), img);
        assert_eq!(flip_horizontal(&img).data(), &[3., 2., 1.]);
        let up = resize_bilinear(&Tensor::<f64>::full(&[2, 2, 3], 0.5), 6, 6).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }
}
