//! Serialisation of images and point clouds into encoder token sequences.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Flattened `Q×Q` image patches in row-major patch-grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePatchSequence<T> {
    /// `[M, Q²·C]`
    pub patches: Tensor<T>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
}

impl<T: Real> ImagePatchSequence<T> {
    pub fn len(&self) -> usize {
        self.patches.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Center-relative neighbourhoods of the sampled centers.
#[derive(Clone, Debug, PartialEq)]
pub struct PointPatchSequence<T> {
    /// `[G, k·C]`, each row the flattened offsets `neighbor − center`.
    pub patches: Tensor<T>,
    /// `[G, C]`
    pub centers: Tensor<T>,
    pub neighbors: usize,
}

impl<T: Real> PointPatchSequence<T> {
    pub fn len(&self) -> usize {
        self.centers.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Splits an `[H, W, C]` image into `M = HW/Q²` flattened patches.
pub fn patchify_image<T: Real>(image: &Tensor<T>, q: usize) -> Result<ImagePatchSequence<T>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("image must be [H, W, C], got {s:?}")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    if q == 0 || h % q != 0 || w % q != 0 {
        return Err(Error::shape(format!(
            "patch size {q} does not divide image {h}x{w}"
        )));
    }
    let (gh, gw) = (h / q, w / q);
    let src = image.data();
    let mut out = Vec::with_capacity(h * w * c);
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..q {
                let start = ((py * q + y) * w + px * q) * c;
                out.extend_from_slice(&src[start..start + q * c]);
            }
        }
    }
    Ok(ImagePatchSequence {
        patches: Tensor::from_vec(&[gh * gw, q * q * c], out)?,
        height: h,
        width: w,
        channels: c,
        patch: q,
    })
}

/// Inverse of [`patchify_image`].
pub fn unpatchify_image<T: Real>(seq: &ImagePatchSequence<T>) -> Result<Tensor<T>> {
    let (h, w, c, q) = (seq.height, seq.width, seq.channels, seq.patch);
    let gw = w / q;
    let mut out = vec![T::zero(); h * w * c];
    for (j, patch) in seq.patches.data().chunks(q * q * c).enumerate() {
        let (py, px) = (j / gw, j % gw);
        for y in 0..q {
            let dst = ((py * q + y) * w + px * q) * c;
            out[dst..dst + q * c].copy_from_slice(&patch[y * q * c..(y + 1) * q * c]);
        }
    }
    Tensor::from_vec(&[h, w, c], out)
}

fn check_cloud<T: Real>(points: &Tensor<T>) -> Result<(usize, usize)> {
    let s = points.shape();
    if s.len() != 2 {
        return Err(Error::shape(format!("point cloud must be [N, C], got {s:?}")));
    }
    Ok((s[0], s[1]))
}

#[inline]
fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
}

/// Farthest point sampling with an rng-drawn first index.
pub fn farthest_point_sample<T: Real>(
    points: &Tensor<T>,
    g: usize,
    rng: &mut RngStream,
) -> Result<Vec<usize>> {
    let (n, _) = check_cloud(points)?;
    check_count("G", g, n)?;
    let first = rng.below(n);
    farthest_point_sample_from(points, g, first)
}

fn check_count(name: &str, v: usize, n: usize) -> Result<()> {
    if v < 1 || v > n {
        return Err(Error::param(format!(
            "{name} = {v} must lie in [1, {n}] for a cloud of {n} points"
        )));
    }
    Ok(())
}

/// Farthest point sampling from a fixed first index. Each further pick
/// maximises the squared distance to the nearest already-selected point;
/// ties go to the lowest index.
pub fn farthest_point_sample_from<T: Real>(
    points: &Tensor<T>,
    g: usize,
    first: usize,
) -> Result<Vec<usize>> {
    let (n, c) = check_cloud(points)?;
    check_count("G", g, n)?;
    if first >= n {
        return Err(Error::param(format!("first index {first} out of range")));
    }
    let data = points.data();
    let mut nearest = vec![T::infinity(); n];
    let mut picked = Vec::with_capacity(g);
    let mut current = first;
    for _ in 0..g {
        picked.push(current);
        let cp = &data[current * c..(current + 1) * c];
        nearest[current] = -T::one();
        let mut best = -T::one();
        let mut best_idx = usize::MAX;
        for (i, slot) in nearest.iter_mut().enumerate() {
            if *slot < T::zero() {
                continue;
            }
            let d = sq_dist(&data[i * c..(i + 1) * c], cp);
            if d < *slot {
                *slot = d;
            }
            if *slot > best {
                best = *slot;
                best_idx = i;
            }
        }
        current = best_idx;
    }
    Ok(picked)
}

/// For every center, the `k` nearest cloud points ascending by distance with
/// lowest-index tie-breaking.
pub fn knn_group<T: Real>(
    points: &Tensor<T>,
    centers: &Tensor<T>,
    k: usize,
) -> Result<Vec<Vec<usize>>> {
    let (n, c) = check_cloud(points)?;
    let (_, cc) = check_cloud(centers)?;
    if cc != c {
        return Err(Error::shape(format!(
            "centers have {cc} channels but points have {c}"
        )));
    }
    check_count("k", k, n)?;
    let data = points.data();
    let order = |a: &(T, usize), b: &(T, usize)| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(Ordering::Equal)
            .then(a.1.cmp(&b.1))
    };
    let mut scratch: Vec<(T, usize)> = Vec::with_capacity(n);
    let mut out = Vec::with_capacity(centers.rows());
    for center in centers.data().chunks(c) {
        scratch.clear();
        scratch.extend(
            data.chunks(c)
                .enumerate()
                .map(|(i, p)| (sq_dist(p, center), i)),
        );
        if k < n {
            scratch.select_nth_unstable_by(k - 1, order);
        }
        let head = &mut scratch[..k];
        head.sort_unstable_by(order);
        out.push(head.iter().map(|&(_, i)| i).collect());
    }
    Ok(out)
}

/// FPS followed by kNN grouping with center-subtracted neighbour offsets.
pub fn build_point_patches<T: Real>(
    points: &Tensor<T>,
    g: usize,
    k: usize,
    rng: &mut RngStream,
) -> Result<PointPatchSequence<T>> {
    let (n, _) = check_cloud(points)?;
    check_count("G", g, n)?;
    check_count("k", k, n)?;
    let first = rng.below(n);
    build_point_patches_from(points, g, k, first)
}

pub fn build_point_patches_from<T: Real>(
    points: &Tensor<T>,
    g: usize,
    k: usize,
    first: usize,
) -> Result<PointPatchSequence<T>> {
    let (_, c) = check_cloud(points)?;
    let idx = farthest_point_sample_from(points, g, first)?;
    let data = points.data();
    let mut centers = Vec::with_capacity(g * c);
    for &i in &idx {
        centers.extend_from_slice(&data[i * c..(i + 1) * c]);
    }
    let centers = Tensor::from_vec(&[g, c], centers)?;
    let groups = knn_group(points, &centers, k)?;
    let mut patches = Vec::with_capacity(g * k * c);
    for (group, center) in groups.iter().zip(centers.data().chunks(c)) {
        for &j in group {
            for (&p, &q) in data[j * c..(j + 1) * c].iter().zip(center) {
                patches.push(p - q);
            }
        }
    }
    Ok(PointPatchSequence {
        patches: Tensor::from_vec(&[g, k * c], patches)?,
        centers,
        neighbors: k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_setting_image_shape() {
        let img = Tensor::<f32>::zeros(&[144, 144, 3]);
        let seq = patchify_image(&img, 12).unwrap();
        assert_eq!(seq.patches.shape(), &[144, 432]);
    }

    #[test]
    fn single_patch_is_flattened_image() {
        let img = Tensor::<f64>::from_f64(&[2, 2, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        let seq = patchify_image(&img, 2).unwrap();
        assert_eq!(seq.patches.data(), img.data());
    }

    #[test]
    fn unit_patches_follow_row_major_order() {
        let img = Tensor::<f64>::from_f64(&[2, 2, 1], &[1., 2., 3., 4.]).unwrap();
        let seq = patchify_image(&img, 1).unwrap();
        assert_eq!(seq.patches.shape(), &[4, 1]);
        assert_eq!(seq.patches.data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn patch_size_must_divide() {
        let img = Tensor::<f64>::zeros(&[10, 12, 3]);
        assert!(matches!(patchify_image(&img, 4), Err(Error::Shape(_))));
    }

    #[test]
    fn fps_square_corners() {
        let sq = Tensor::<f64>::from_f64(&[4, 2], &[0., 0., 1., 0., 0., 1., 1., 1.]).unwrap();
        assert_eq!(farthest_point_sample_from(&sq, 2, 0).unwrap(), vec![0, 3]);
        // remaining two corners tie at distance 1 from both picks: lowest index wins
        assert_eq!(farthest_point_sample_from(&sq, 3, 0).unwrap(), vec![0, 3, 1]);
    }

    #[test]
    fn fps_bounds() {
        let cloud = Tensor::<f64>::zeros(&[5, 3]);
        let mut rng = RngStream::new(0);
        assert!(matches!(
            farthest_point_sample(&cloud, 6, &mut rng),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            farthest_point_sample(&cloud, 0, &mut rng),
            Err(Error::Parameter(_))
        ));
        // duplicate points still yield distinct indices
        let all = farthest_point_sample_from(&cloud, 5, 2).unwrap();
        let mut sorted = all.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
        assert_eq!(all[0], 2);
    }

    #[test]
    fn knn_includes_coincident_center() {
        let cloud = Tensor::<f64>::from_f64(&[3, 1], &[0.0, 5.0, 1.0]).unwrap();
        let center = Tensor::<f64>::from_f64(&[1, 1], &[5.0]).unwrap();
        assert_eq!(knn_group(&cloud, &center, 1).unwrap(), vec![vec![1]]);
        assert_eq!(knn_group(&cloud, &center, 3).unwrap(), vec![vec![1, 2, 0]]);
        assert!(matches!(knn_group(&cloud, &center, 4), Err(Error::Parameter(_))));
    }

    #[test]
    fn whole_cloud_patch_is_recentred() {
        let cloud = Tensor::<f64>::from_f64(&[3, 2], &[0., 0., 2., 0., 0., 1.]).unwrap();
        let seq = build_point_patches_from(&cloud, 1, 3, 1).unwrap();
        assert_eq!(seq.centers.data(), &[2., 0.]);
        // sorted by distance from (2,0): self, (0,0) at 4, (0,1) at 5
        assert_eq!(seq.patches.data(), &[0., 0., -2., 0., -2., 1.]);
    }
}
