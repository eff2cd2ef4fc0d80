//! Dataset loading: MNIST-style IDX files and seeded Gaussian blobs.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::nn::{Batch, Matrix};
use crate::rng::{rng_for, Stream};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Labelled feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> RawDataset {
        RawDataset {
            features: self.features.gather(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: self.split,
        }
    }

    pub fn as_batch(&self) -> Batch {
        Batch {
            features: self.features.clone(),
            labels: self.labels.clone(),
        }
    }
}

fn be_u32(bytes: &[u8], at: usize, file: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| FedError::data(file, "truncated header"))
}

fn read_idx_images(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| FedError::data(path, e.to_string()))?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(FedError::data(
            path,
            format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let count = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let expected = count * rows * cols;
    let pixels = &bytes[16..];
    if pixels.len() != expected {
        return Err(FedError::data(
            path,
            format!(
                "expected {expected} pixel bytes for {count} images of {rows}x{cols}, found {}",
                pixels.len()
            ),
        ));
    }
    Ok((count, rows * cols, pixels.to_vec()))
}

fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| FedError::data(path, e.to_string()))?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(FedError::data(
            path,
            format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let count = be_u32(&bytes, 4, path)? as usize;
    let labels = &bytes[8..];
    if labels.len() != count {
        return Err(FedError::data(
            path,
            format!("header announces {count} labels, found {}", labels.len()),
        ));
    }
    Ok(labels.to_vec())
}

/// Loads an IDX image/label pair, scaling pixels by 1/255.
pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<RawDataset> {
    let (count, dim, pixels) = read_idx_images(images)?;
    let raw_labels = read_idx_labels(labels)?;
    if raw_labels.len() != count {
        return Err(FedError::data(
            labels,
            format!(
                "{} labels but {count} images in {}",
                raw_labels.len(),
                images.display()
            ),
        ));
    }
    if count == 0 {
        return Err(FedError::data(images, "file holds no images"));
    }
    let features = Matrix::from_vec(
        count,
        dim,
        pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
    )?;
    let labels: Vec<usize> = raw_labels.iter().map(|&l| usize::from(l)).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    Ok(RawDataset {
        features,
        labels,
        classes,
        split,
    })
}

/// Loads `train-*` / `t10k-*` files from an MNIST directory.
pub fn load_mnist(dir: &Path) -> Result<(RawDataset, RawDataset)> {
    let train = load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
        Split::Train,
    )?;
    let test = load_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
        Split::Test,
    )?;
    Ok((train, test))
}

/// Writes an IDX image file (`u8` pixels, `count x rows x cols`).
pub fn write_idx_images(path: &Path, rows: u32, cols: u32, images: &[Vec<u8>]) -> Result<()> {
    let mut out = Vec::with_capacity(16 + images.len() * (rows * cols) as usize);
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&rows.to_be_bytes());
    out.extend_from_slice(&cols.to_be_bytes());
    for img in images {
        out.extend_from_slice(img);
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Gaussian-mixture classification data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    /// Distance between class means in units of `scale`.
    pub separation: f64,
    /// Per-coordinate standard deviation around each class mean.
    #[serde(default = "default_scale")]
    pub scale: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_scale() -> f64 {
    1.0
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(FedError::config("dataset.classes", "need at least 2 classes"));
        }
        if self.dim == 0 {
            return Err(FedError::config("dataset.dim", "must be positive"));
        }
        if !(self.separation >= 0.0) || !(self.scale > 0.0) {
            return Err(FedError::config(
                "dataset.separation",
                "separation must be >= 0 and scale > 0",
            ));
        }
        if self.train_samples == 0 || self.test_samples == 0 {
            return Err(FedError::config(
                "dataset.train_samples",
                "train and test sizes must be positive",
            ));
        }
        Ok(())
    }

    /// Class means with pairwise distance `separation * scale`: scaled basis
    /// vectors when `classes <= dim`, random unit directions otherwise.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let radius = self.separation * self.scale / std::f64::consts::SQRT_2;
        if self.classes <= self.dim {
            return (0..self.classes)
                .map(|c| {
                    let mut m = vec![0.0; self.dim];
                    m[c] = radius;
                    m
                })
                .collect();
        }
        let mut rng = rng_for(self.seed, Stream::Data, &[2]);
        (0..self.classes)
            .map(|_| {
                let v: Vec<f64> = (0..self.dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x / norm * radius).collect()
            })
            .collect()
    }
}

fn draw_blobs(spec: &SyntheticSpec, means: &[Vec<f64>], n: usize, stream: u64, split: Split) -> RawDataset {
    let mut rng = rng_for(spec.seed, Stream::Data, &[stream]);
    let noise = Normal::new(0.0, spec.scale).expect("positive scale");
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = rng.gen_range(0..spec.classes);
        data.extend(means[y].iter().map(|m| m + noise.sample(&mut rng)));
        labels.push(y);
    }
    RawDataset {
        features: Matrix::from_vec(n, spec.dim, data).expect("sized buffer"),
        labels,
        classes: spec.classes,
        split,
    }
}

/// Independent seeded train and test draws from the same mixture.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(RawDataset, RawDataset)> {
    spec.validate()?;
    let means = spec.class_means();
    Ok((
        draw_blobs(spec, &means, spec.train_samples, 0, Split::Train),
        draw_blobs(spec, &means, spec.test_samples, 1, Split::Test),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Nearest-class-mean classifier fitted on `train`, scored on `test`.
    fn centroid_probe(train: &RawDataset, test: &RawDataset) -> f64 {
        let (l, d) = (train.classes, train.dim());
        let mut sums = vec![vec![0.0; d]; l];
        let mut counts = vec![0usize; l];
        for (row, &y) in train.features.iter_rows().zip(&train.labels) {
            for (s, x) in sums[y].iter_mut().zip(row) {
                *s += x;
            }
            counts[y] += 1;
        }
        for (s, &c) in sums.iter_mut().zip(&counts) {
            s.iter_mut().for_each(|v| *v /= c.max(1) as f64);
        }
        let correct = test
            .features
            .iter_rows()
            .zip(&test.labels)
            .filter(|(row, &y)| {
                let best = (0..l)
                    .min_by(|&a, &b| {
                        let da: f64 = sums[a].iter().zip(*row).map(|(m, x)| (m - x).powi(2)).sum();
                        let db: f64 = sums[b].iter().zip(*row).map(|(m, x)| (m - x).powi(2)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                best == y
            })
            .count();
        correct as f64 / test.len() as f64
    }

    fn spec(separation: f64, classes: usize) -> SyntheticSpec {
        SyntheticSpec {
            classes,
            dim: 16,
            separation,
            scale: 1.0,
            train_samples: 3000,
            test_samples: 3000,
            seed: 11,
        }
    }

    #[test]
    fn well_separated_blobs_are_linearly_separable() {
        let (train, test) = gen_synthetic(&spec(10.0, 3)).unwrap();
        assert!(centroid_probe(&train, &test) > 0.99);
        let (train, test) = gen_synthetic(&spec(4.0, 3)).unwrap();
        assert!(centroid_probe(&train, &test) > 0.90);
    }

    #[test]
    fn zero_separation_is_chance() {
        let (train, test) = gen_synthetic(&spec(0.0, 3)).unwrap();
        let acc = centroid_probe(&train, &test);
        // binomial 3σ around 1/3 on 3000 draws is ±0.026; allow probe noise
        assert!((acc - 1.0 / 3.0).abs() < 0.05, "accuracy {acc}");
    }

    #[test]
    fn synthetic_is_deterministic_and_split_disjoint() {
        let a = gen_synthetic(&spec(4.0, 3)).unwrap();
        let b = gen_synthetic(&spec(4.0, 3)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0.features.row(0), a.1.features.row(0));
        let mut other = spec(4.0, 3);
        other.seed = 12;
        assert_ne!(gen_synthetic(&other).unwrap().0, a.0);
    }

    #[test]
    fn more_classes_than_dims_still_separates() {
        let mut s = spec(8.0, 5);
        s.dim = 3;
        let means = s.class_means();
        for i in 0..5 {
            for j in 0..i {
                let d: f64 = means[i].iter().zip(&means[j]).map(|(a, b)| (a - b).powi(2)).sum();
                assert!(d > 0.0);
            }
        }
    }

    #[test]
    fn idx_single_zero_image_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        write_idx_images(&img, 28, 28, &[vec![0u8; 784]]).unwrap();
        write_idx_labels(&lab, &[7]).unwrap();
        let ds = load_idx(&img, &lab, Split::Train).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.dim(), 784);
        assert!(ds.features.row(0).iter().all(|&v| v == 0.0));
        assert_eq!(ds.labels, vec![7]);
    }

    #[test]
    fn idx_scales_pixels_into_unit_interval() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        write_idx_images(&img, 1, 3, &[vec![0, 128, 255], vec![1, 2, 3]]).unwrap();
        write_idx_labels(&lab, &[0, 1]).unwrap();
        let ds = load_idx(&img, &lab, Split::Test).unwrap();
        assert_eq!(ds.features.row(0), &[0.0, 128.0 / 255.0, 1.0]);
        assert!(ds.features.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn idx_errors() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        write_idx_images(&img, 2, 2, &[vec![0; 4], vec![1; 4]]).unwrap();
        write_idx_labels(&lab, &[1, 2, 3]).unwrap();
        assert!(matches!(load_idx(&img, &lab, Split::Train), Err(FedError::Data { .. })));

        // swapped files: wrong magic
        write_idx_labels(&lab, &[1, 2]).unwrap();
        let err = load_idx(&lab, &img, Split::Train).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");

        // truncated pixel payload
        let bytes = fs::read(&img).unwrap();
        fs::write(&img, &bytes[..bytes.len() - 1]).unwrap();
        let err = load_idx(&img, &lab, Split::Train).unwrap_err();
        assert!(err.to_string().contains("pixel bytes"), "{err}");

        fs::write(&img, [0u8, 0, 8]).unwrap();
        assert!(load_idx(&img, &lab, Split::Train).is_err());
        assert!(load_idx(&dir.path().join("missing"), &lab, Split::Train).is_err());
    }
}
