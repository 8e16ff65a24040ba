//! Paired point-cloud / image datasets: a procedural generator, file
//! loaders and batching.

pub mod formats;
pub mod render;
pub mod shapes;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use formats::{DatasetManifest, ManifestEntry};
use render::{render_depth, Camera};
use shapes::{Family, Shape};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{Purpose, RngStream};
use crate::tensor::Tensor;

/// 8-bit RGB raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    /// `[H, W, 3]` with values scaled into `[0, 1]`.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.pixels.iter().map(|&b| T::lit(b as f64 / 255.0)).collect();
        Tensor::from_vec(&[self.height, self.width, 3], data).expect("image dims are nonzero")
    }

    pub fn foreground_fraction(&self) -> f64 {
        let fg = self.pixels.chunks(3).filter(|p| p.iter().any(|&v| v > 0)).count();
        fg as f64 / (self.height * self.width) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::param(format!("unknown split {s:?}"))),
        }
    }
}

/// A loaded dataset entry with every rendered view.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    pub class_id: usize,
    pub split: Split,
    /// `[N, 3]`, centered and scaled into the unit ball.
    pub points: Tensor<f32>,
    pub views: Vec<Image>,
}

/// A point cloud with one image view selected for it.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample<T> {
    pub points: Tensor<T>,
    pub image: Tensor<T>,
    pub class_id: usize,
    pub sample_id: String,
}

impl Sample {
    /// Pairs the cloud with a uniformly drawn view.
    pub fn pair<T: Real>(&self, rng: &mut RngStream) -> Result<PairedSample<T>> {
        if self.views.is_empty() {
            return Err(Error::Data(format!("sample {} has no images", self.sample_id)));
        }
        let view = &self.views[rng.below(self.views.len())];
        Ok(PairedSample {
            points: self.points.cast(),
            image: view.to_tensor(),
            class_id: self.class_id,
            sample_id: self.sample_id.clone(),
        })
    }
}

/// Centers on the centroid and divides by the largest remaining norm.
/// Returns the normalised cloud with the applied `(centroid, scale)`.
pub fn normalize_points(points: &[[f64; 3]]) -> (Vec<[f64; 3]>, [f64; 3], f64) {
    let n = points.len().max(1) as f64;
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    c.iter_mut().for_each(|v| *v /= n);
    let centered: Vec<[f64; 3]> = points
        .iter()
        .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect();
    let scale = centered.iter().map(|p| shapes::norm(*p)).fold(0.0, f64::max);
    if scale == 0.0 {
        return (centered, c, 1.0);
    }
    let out = centered
        .iter()
        .map(|p| [p[0] / scale, p[1] / scale, p[2] / scale])
        .collect();
    (out, c, scale)
}

fn to_tensor(points: &[[f64; 3]]) -> Tensor<f32> {
    let data = points.iter().flatten().map(|&v| v as f32).collect();
    Tensor::from_vec(&[points.len(), 3], data).expect("nonempty cloud")
}

/// Reads a point file (either format), normalises it and, when it has more
/// than `sample_size` points, keeps a random subset of that size.
pub fn load_points(path: &Path, sample_size: Option<usize>, rng: &mut RngStream) -> Result<Tensor<f32>> {
    let raw = formats::read_points_raw(path)?;
    if raw.is_empty() {
        return Err(Error::Data(format!("{} contains no points", path.display())));
    }
    let mut pts: Vec<[f64; 3]> = raw
        .iter()
        .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
        .collect();
    if let Some(k) = sample_size {
        if k == 0 {
            return Err(Error::param("sample size must be positive"));
        }
        if pts.len() > k {
            let mut keep = rng.sample_indices(pts.len(), k);
            keep.sort_unstable();
            pts = keep.into_iter().map(|i| pts[i]).collect();
        }
    }
    Ok(to_tensor(&normalize_points(&pts).0))
}

/// Parameters of the procedural corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub per_class: usize,
    pub n_points: usize,
    pub image_size: usize,
    pub views: usize,
    /// Camera tilt above the horizon, radians.
    pub elevation: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            class_count: 8,
            per_class: 64,
            n_points: 1024,
            image_size: 144,
            views: 4,
            elevation: 0.35,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 || self.class_count > Family::ALL.len() {
            return Err(Error::param(format!(
                "class_count must lie in [1, {}], got {}",
                Family::ALL.len(),
                self.class_count
            )));
        }
        if self.per_class == 0 || self.n_points == 0 || self.image_size == 0 || self.views == 0 {
            return Err(Error::param(
                "per_class, n_points, image_size and views must all be positive",
            ));
        }
        Ok(())
    }
}

/// Per-class split: the first 75% of a shuffled class go to train, the next
/// 12.5% to val and the rest to test. Tiny classes keep at least one train
/// sample.
pub fn split_assignment(per_class: usize, rng: &mut RngStream) -> Vec<Split> {
    let mut order: Vec<usize> = (0..per_class).collect();
    rng.shuffle(&mut order);
    let n_train = ((per_class as f64 * 0.75).round() as usize).max(1).min(per_class);
    let n_val = ((per_class as f64 * 0.125).round() as usize).min(per_class - n_train);
    let mut out = vec![Split::Test; per_class];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

fn synth_one(spec: &SyntheticSpec, family: Family, class_id: usize, index: usize, split: Split, root: &RngStream) -> Sample {
    let global = (class_id * spec.per_class + index) as u64;
    let mut rng = root.substream(Purpose::Data, global);
    let shape = Shape::random(family, &mut rng);
    let raw = shape.sample_surface(spec.n_points, &mut rng);
    let (norm, centroid, scale) = normalize_points(&raw);
    let sdf = |p: [f64; 3]| {
        let q = [
            p[0] * scale + centroid[0],
            p[1] * scale + centroid[1],
            p[2] * scale + centroid[2],
        ];
        shape.sdf(q) / scale
    };
    let views = (0..spec.views)
        .map(|_| {
            let camera = Camera {
                azimuth: rng.uniform() * std::f64::consts::TAU,
                elevation: spec.elevation,
            };
            render_depth(&sdf, spec.image_size, camera)
        })
        .collect();
    Sample {
        sample_id: format!("{}_{:04}", family.name(), index),
        class_id,
        split,
        points: to_tensor(&norm),
        views,
    }
}

/// Generates the corpus in memory, in class-major order.
pub fn synthesize(spec: &SyntheticSpec, rng: &RngStream) -> Result<Vec<Sample>> {
    spec.validate()?;
    let jobs: Vec<(Family, usize, usize, Split)> = (0..spec.class_count)
        .flat_map(|c| {
            let splits = split_assignment(spec.per_class, &mut rng.substream(Purpose::Shuffle, c as u64));
            (0..spec.per_class).map(move |i| (Family::ALL[c], c, i, splits[i]))
        })
        .collect();
    Ok(jobs
        .into_par_iter()
        .map(|(f, c, i, s)| synth_one(spec, f, c, i, s, rng))
        .collect())
}

/// Generates the corpus and writes it under `root`: `manifest.json`,
/// `points/*.vpts` and `images/*_v{k}.ppm`.
pub fn generate_synthetic(spec: &SyntheticSpec, root: &Path, rng: &RngStream) -> Result<DatasetManifest> {
    let samples = synthesize(spec, rng)?;
    write_dataset(&samples, spec.class_count, root)
}

pub fn write_dataset(samples: &[Sample], class_count: usize, root: &Path) -> Result<DatasetManifest> {
    let classes = Family::ALL[..class_count].iter().map(|f| f.name().to_string()).collect();
    let entries = samples
        .par_iter()
        .map(|s| {
            let pts_rel = format!("points/{}.vpts", s.sample_id);
            let pts: Vec<[f32; 3]> = s.points.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
            formats::write_points(&root.join(&pts_rel), &pts)?;
            let mut images = Vec::with_capacity(s.views.len());
            for (k, v) in s.views.iter().enumerate() {
                let rel = format!("images/{}_v{k}.ppm", s.sample_id);
                formats::write_file(&root.join(&rel), &formats::encode_ppm(v))?;
                images.push(rel);
            }
            Ok(ManifestEntry {
                sample_id: s.sample_id.clone(),
                class_id: s.class_id,
                split: s.split,
                points: pts_rel,
                images,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest::new(classes, entries);
    manifest.validate()?;
    formats::write_file(&root.join("manifest.json"), manifest.to_json().as_bytes())?;
    Ok(manifest)
}

/// A manifest with every sample loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LoadOptions {
    /// Random subsample size for clouds with more points than this.
    pub sample_size: Option<usize>,
    pub seed: u64,
}

impl Dataset {
    /// Loads `root/manifest.json` (or a manifest path directly).
    pub fn load(path: &Path, opts: LoadOptions) -> Result<Dataset> {
        let (root, manifest_path) = if path.is_dir() {
            (path.to_path_buf(), path.join("manifest.json"))
        } else {
            (
                path.parent().map(Path::to_path_buf).unwrap_or_default(),
                path.to_path_buf(),
            )
        };
        let text = String::from_utf8(formats::read_file(&manifest_path)?).map_err(|e| Error::Format {
            offset: e.utf8_error().valid_up_to() as u64,
            msg: "manifest is not valid UTF-8".into(),
        })?;
        let manifest = DatasetManifest::from_json(&text)?;
        let base = RngStream::new(opts.seed);
        let samples = manifest
            .entries
            .par_iter()
            .enumerate()
            .map(|(i, e)| {
                let mut rng = base.substream(Purpose::Data, i as u64);
                let points = load_points(&root.join(&e.points), opts.sample_size, &mut rng)?;
                let views = e
                    .images
                    .iter()
                    .map(|rel| formats::read_ppm(&root.join(rel)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Sample {
                    sample_id: e.sample_id.clone(),
                    class_id: e.class_id,
                    split: e.split,
                    points,
                    views,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            root,
            classes: manifest.classes,
            samples,
        })
    }

    pub fn from_samples(classes: Vec<String>, samples: Vec<Sample>) -> Dataset {
        Dataset {
            root: PathBuf::new(),
            classes,
            samples,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn split_owned(&self, split: Split) -> Vec<Sample> {
        self.samples.iter().filter(|s| s.split == split).cloned().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchMode {
    /// Partial final batch dropped.
    Pretrain,
    /// Partial final batch kept.
    Eval,
}

/// Index batches over `0..n`, shuffled by `rng` when given.
pub fn batch_indices(n: usize, batch_size: usize, mode: BatchMode, rng: Option<&mut RngStream>) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::contract("cannot batch an empty split"));
    }
    if batch_size == 0 {
        return Err(Error::param("batch size must be positive"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(r) = rng {
        r.shuffle(&mut order);
    }
    Ok(order
        .chunks(batch_size)
        .filter(|c| mode == BatchMode::Eval || c.len() == batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

/// One epoch of paired batches over `samples`, shuffled from the epoch's
/// substream of `rng`, each cloud paired with a random view.
pub fn batch_iter<'a>(
    samples: &'a [Sample],
    batch_size: usize,
    mode: BatchMode,
    epoch: u64,
    rng: &'a RngStream,
) -> Result<impl Iterator<Item = Result<Vec<PairedSample<f32>>>> + 'a> {
    let mut shuffle = rng.substream(Purpose::Shuffle, epoch);
    let batches = batch_indices(samples.len(), batch_size, mode, Some(&mut shuffle))?;
    let pairing = rng.substream(Purpose::Pairing, epoch);
    Ok(batches.into_iter().map(move |b| {
        b.into_iter()
            .map(|i| samples[i].pair(&mut pairing.child(i as u64)))
            .collect()
    }))
}

/// Rotation-agnostic descriptors (covariance spectrum and radial-distance
/// statistics) used as a non-learned baseline for class separability.
pub fn handcrafted_features(points: &Tensor<f32>) -> Vec<f64> {
    let pts: Vec<[f64; 3]> = points
        .data()
        .chunks(3)
        .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
        .collect();
    let n = pts.len() as f64;
    let mut cov = nalgebra::Matrix3::<f64>::zeros();
    for p in &pts {
        let v = nalgebra::Vector3::new(p[0], p[1], p[2]);
        cov += v * v.transpose();
    }
    cov /= n;
    let mut eig: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().copied().collect();
    eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let radii: Vec<f64> = pts.iter().map(|p| shapes::norm(*p)).collect();
    let mean = radii.iter().sum::<f64>() / n;
    let std = (radii.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut hist = [0.0; 8];
    for r in &radii {
        hist[((r * 8.0) as usize).min(7)] += 1.0 / n;
    }
    let mut f = eig;
    f.extend([mean, std, radii.iter().cloned().fold(f64::INFINITY, f64::min)]);
    f.extend(hist);
    f
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drop_last_and_keep_last() {
        let sizes = |m| {
            batch_indices(10, 4, m, None)
                .unwrap()
                .iter()
                .map(Vec::len)
                .collect::<Vec<_>>()
        };
        assert_eq!(sizes(BatchMode::Pretrain), vec![4, 4]);
        assert_eq!(sizes(BatchMode::Eval), vec![4, 4, 2]);
        assert!(matches!(
            batch_indices(0, 4, BatchMode::Eval, None),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn split_proportions() {
        let s = split_assignment(64, &mut RngStream::new(1));
        let count = |x| s.iter().filter(|&&v| v == x).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (48, 8, 8));
    }

    #[test]
    fn normalisation_bounds_the_cloud() {
        let pts = vec![[1.0, 2.0, 3.0], [3.0, 2.0, 1.0], [2.0, 5.0, 2.0]];
        let (out, c, _) = normalize_points(&pts);
        assert_eq!(c, [2.0, 3.0, 2.0]);
        let max = out.iter().map(|p| shapes::norm(*p)).fold(0.0, f64::max);
        assert!((max - 1.0).abs() < 1e-12);
    }
}
