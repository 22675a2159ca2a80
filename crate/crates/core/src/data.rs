//! Synthetic classification problems and IDX (MNIST-format) ingestion.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// One labelled partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.inputs.cols()
    }

    /// Rows `indices` gathered into a new batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let f = self.features();
        let mut data = Vec::with_capacity(indices.len() * f);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.inputs.data()[i * f..(i + 1) * f]);
            labels.push(self.labels[i]);
        }
        (Tensor::from_parts(vec![indices.len(), f], data), labels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub validation: Split,
    pub num_classes: usize,
    pub source: String,
}

impl Dataset {
    pub fn features(&self) -> usize {
        self.train.features()
    }

    /// Canonical byte encoding, used for determinism checks and hashing.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for split in [&self.train, &self.validation] {
            out.extend_from_slice(&(split.len() as u64).to_le_bytes());
            for v in split.inputs.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
            for &l in &split.labels {
                out.extend_from_slice(&(l as u64).to_le_bytes());
            }
        }
        out
    }

    /// Moves the last `fraction` of the training rows into validation.
    pub fn split_validation(mut self, fraction: f64) -> Self {
        let n = self.train.len();
        let n_val = ((n as f64) * fraction).round() as usize;
        let n_train = n - n_val.min(n);
        let f = self.features();
        let (data, labels) = (self.train.inputs.into_data(), self.train.labels);
        self.validation = Split {
            inputs: Tensor::from_parts(vec![n - n_train, f], data[n_train * f..].to_vec()),
            labels: labels[n_train..].to_vec(),
        };
        self.train = Split {
            inputs: Tensor::from_parts(vec![n_train, f], data[..n_train * f].to_vec()),
            labels: labels[..n_train].to_vec(),
        };
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Blobs,
    Spirals,
    XorGrid,
}

impl FromStr for DatasetKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "blobs" => Ok(Self::Blobs),
            "spirals" => Ok(Self::Spirals),
            "xor-grid" => Ok(Self::XorGrid),
            other => Err(DataError::InvalidKind(other.to_string())),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Blobs => "blobs",
            Self::Spirals => "spirals",
            Self::XorGrid => "xor-grid",
        })
    }
}

/// Parameters of a synthetic problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n: usize,
    pub classes: usize,
    pub noise: f64,
    pub seed: u64,
    pub validation_fraction: f64,
}

impl Default for DatasetSpec {
    /// The reference problem: two interleaved spirals.
    fn default() -> Self {
        Self {
            kind: DatasetKind::Spirals,
            n: 1000,
            classes: 2,
            noise: 0.03,
            seed: 7,
            validation_fraction: 0.2,
        }
    }
}

impl DatasetSpec {
    pub fn generate(&self) -> Result<Dataset, DataError> {
        generate_dataset(self.kind, self.n, self.classes, self.noise, self.seed)
            .map(|d| d.split_validation(self.validation_fraction))
    }
}

/// Deterministic synthetic 2-D classification data. All rows land in the
/// training split; see [`Dataset::split_validation`].
pub fn generate_dataset(
    kind: DatasetKind,
    n: usize,
    classes: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if classes < 2 {
        return Err(DataError::InvalidParams(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if n < classes {
        return Err(DataError::InvalidParams(format!(
            "n = {n} is smaller than the class count {classes}"
        )));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(DataError::InvalidParams(format!(
            "noise must be >= 0, got {noise}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<([f64; 2], usize)> = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let point = match kind {
            DatasetKind::Blobs => {
                let angle = std::f64::consts::TAU * class as f64 / classes as f64;
                [2.0 * angle.cos(), 2.0 * angle.sin()]
            }
            DatasetKind::Spirals => {
                let r: f64 = 0.1 + 0.9 * rng.gen::<f64>();
                let angle = 1.75 * std::f64::consts::TAU * r
                    + std::f64::consts::TAU * class as f64 / classes as f64;
                [r * angle.cos(), r * angle.sin()]
            }
            DatasetKind::XorGrid => {
                // Checkerboard over a `cells × cells` grid on [-1, 1]².
                let cells = classes.max(2);
                let (cx, cy) = loop {
                    let cx = rng.gen_range(0..cells);
                    let cy = rng.gen_range(0..cells);
                    if (cx + cy) % classes == class {
                        break (cx, cy);
                    }
                };
                let width = 2.0 / cells as f64;
                [
                    -1.0 + width * (cx as f64 + rng.gen::<f64>()),
                    -1.0 + width * (cy as f64 + rng.gen::<f64>()),
                ]
            }
        };
        let jitter: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
        rows.push((
            [point[0] + noise * jitter[0], point[1] + noise * jitter[1]],
            class,
        ));
    }
    rows.shuffle(&mut rng);
    let data = rows.iter().flat_map(|(p, _)| p.iter().copied()).collect();
    let labels = rows.iter().map(|(_, c)| *c).collect();
    Ok(Dataset {
        train: Split {
            inputs: Tensor::from_parts(vec![n, 2], data),
            labels,
        },
        validation: Split {
            inputs: Tensor::from_parts(vec![0, 2], Vec::new()),
            labels: Vec::new(),
        },
        num_classes: classes,
        source: format!("{kind}(n={n}, classes={classes}, noise={noise}, seed={seed})"),
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| DataError::Truncated {
            path: PathBuf::from(path),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<(), DataError> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

/// Reads an IDX image/label file pair. Pixels are scaled to `[0, 1]`; every
/// row lands in the training split.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let images = read_file(images_path)?;
    let labels = read_file(labels_path)?;

    check_magic(&images, IDX_IMAGES_MAGIC, images_path)?;
    let count = be_u32(&images, 4, images_path)? as usize;
    let rows = be_u32(&images, 8, images_path)? as usize;
    let cols = be_u32(&images, 12, images_path)? as usize;
    let pixels = count * rows * cols;
    let body = images
        .get(16..16 + pixels)
        .ok_or_else(|| DataError::Truncated {
            path: images_path.to_path_buf(),
        })?;

    check_magic(&labels, IDX_LABELS_MAGIC, labels_path)?;
    let label_count = be_u32(&labels, 4, labels_path)? as usize;
    if label_count != count {
        return Err(DataError::CountMismatch {
            images: count,
            labels: label_count,
        });
    }
    let label_bytes = labels
        .get(8..8 + label_count)
        .ok_or_else(|| DataError::Truncated {
            path: labels_path.to_path_buf(),
        })?;

    let data = body.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&l| usize::from(l)).collect();
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    Ok(Dataset {
        train: Split {
            inputs: Tensor::from_parts(vec![count, rows * cols], data),
            labels,
        },
        validation: Split {
            inputs: Tensor::from_parts(vec![0, rows * cols], Vec::new()),
            labels: Vec::new(),
        },
        num_classes,
        source: images_path.display().to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(count: u32, rows: u32, cols: u32, fill: u8) -> Vec<u8> {
        let mut b = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
        for v in [count, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend(std::iter::repeat_n(fill, (count * rows * cols) as usize));
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    fn write_pair(images: &[u8], labels: &[u8]) -> (tempfile::TempDir, PathBuf, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("images.idx");
        let lp = dir.path().join("labels.idx");
        std::fs::write(&ip, images).unwrap();
        std::fs::write(&lp, labels).unwrap();
        (dir, ip, lp)
    }

    #[test]
    fn reads_hand_built_fixture() {
        let mut images = idx_images(4, 28, 28, 0);
        images[16] = 255;
        images[16 + 784 + 1] = 51;
        let (_d, ip, lp) = write_pair(&images, &idx_labels(&[3, 1, 4, 1]));
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.train.inputs.shape(), &[4, 784]);
        assert_eq!(ds.train.labels, vec![3, 1, 4, 1]);
        assert_eq!(ds.train.inputs.get(0, 0), 1.0);
        assert_eq!(ds.train.inputs.get(1, 1), 0.2);
        assert_eq!(ds.num_classes, 5);
    }

    #[test]
    fn count_mismatch() {
        let (_d, ip, lp) = write_pair(&idx_images(4, 2, 2, 1), &idx_labels(&[0, 1, 2]));
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(DataError::CountMismatch {
                images: 4,
                labels: 3
            })
        ));
    }

    #[test]
    fn empty_file_is_truncated() {
        let (_d, ip, lp) = write_pair(&[], &idx_labels(&[0]));
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(DataError::Truncated { .. })
        ));
        let mut short = idx_images(2, 2, 2, 9);
        short.truncate(short.len() - 1);
        let (_d, ip, lp) = write_pair(&short, &idx_labels(&[0, 1]));
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(DataError::Truncated { .. })
        ));
    }

    #[test]
    fn bad_magic() {
        let (_d, ip, lp) = write_pair(&idx_labels(&[1]), &idx_labels(&[1]));
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(DataError::BadMagic {
                found: IDX_LABELS_MAGIC,
                ..
            })
        ));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(DatasetKind::Blobs, 1000, 4, 0.3, 7).unwrap();
        let b = generate_dataset(DatasetKind::Blobs, 1000, 4, 0.3, 7).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = generate_dataset(DatasetKind::Blobs, 1000, 4, 0.3, 8).unwrap();
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn labels_in_range_and_splits_disjoint() {
        for kind in [
            DatasetKind::Blobs,
            DatasetKind::Spirals,
            DatasetKind::XorGrid,
        ] {
            let spec = DatasetSpec {
                kind,
                classes: 3,
                n: 300,
                ..DatasetSpec::default()
            };
            let ds = spec.generate().unwrap();
            assert_eq!(ds.train.len() + ds.validation.len(), 300);
            assert_eq!(ds.validation.len(), 60);
            assert!(ds
                .train
                .labels
                .iter()
                .chain(&ds.validation.labels)
                .all(|&l| l < 3));
        }
    }

    #[test]
    fn invalid_inputs() {
        assert!(matches!(
            "moons".parse::<DatasetKind>(),
            Err(DataError::InvalidKind(_))
        ));
        assert!(generate_dataset(DatasetKind::Blobs, 1, 2, 0.1, 0).is_err());
        assert!(generate_dataset(DatasetKind::Blobs, 10, 2, -1.0, 0).is_err());
    }
}
