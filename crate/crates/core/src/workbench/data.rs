//! Synthetic datasets and the IDX file format.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, IdxError, Result};
use crate::tensor::{Scalar, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
/// Four-dimensional images `(n, c, h, w)`, for multi-channel data.
pub const IDX_IMAGES4_MAGIC: u32 = 0x0000_0804;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn default_val_fraction() -> f64 {
    0.2
}

/// Where a dataset comes from and how it is split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Per-class uniform templates plus clamped Gaussian pixel noise.
    Synthetic {
        classes: usize,
        /// `[C, H, W]`.
        image: [usize; 3],
        per_class: usize,
        /// Standard deviation of the pixel noise.
        noise: f64,
        seed: u64,
        #[serde(default = "default_val_fraction")]
        val_fraction: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        /// Defaults to one more than the largest label.
        #[serde(default)]
        classes: Option<usize>,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_val_fraction")]
        val_fraction: f64,
    },
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            DatasetSpec::Synthetic {
                classes,
                image,
                per_class,
                noise,
                val_fraction,
                ..
            } => {
                if *classes < 2 {
                    return Err(Error::Config(format!("synthetic data needs at least 2 classes, got {classes}")));
                }
                if image.contains(&0) || *per_class < 2 {
                    return Err(Error::Config("synthetic image extents and per-class count must be positive (>= 2 samples)".into()));
                }
                if !(*noise >= 0.0) || !noise.is_finite() {
                    return Err(Error::Config(format!("noise must be finite and >= 0, got {noise}")));
                }
                check_fraction(*val_fraction)
            }
            DatasetSpec::Idx {
                images,
                labels,
                val_fraction,
                ..
            } => {
                for p in [images, labels] {
                    if !p.is_file() {
                        return Err(Error::Config(format!("IDX file {} does not exist", p.display())));
                    }
                }
                check_fraction(*val_fraction)
            }
        }
    }

    /// The whole dataset, before splitting.
    pub fn load<T: Scalar>(&self) -> Result<Dataset<T>> {
        self.validate()?;
        match self {
            DatasetSpec::Synthetic { .. } => gen_synthetic_dataset(self),
            DatasetSpec::Idx {
                images,
                labels,
                classes,
                ..
            } => {
                let d = load_idx::<T>(images, labels)?;
                match classes {
                    Some(k) => Dataset::new(d.images, d.labels, *k),
                    None => Ok(d),
                }
            }
        }
    }

    /// `(train, val)` after the stratified split.
    pub fn load_split<T: Scalar>(&self) -> Result<(Dataset<T>, Dataset<T>)> {
        let (fraction, seed) = match self {
            DatasetSpec::Synthetic { val_fraction, seed, .. } | DatasetSpec::Idx { val_fraction, seed, .. } => {
                (*val_fraction, *seed)
            }
        };
        self.load::<T>()?.split(fraction, seed)
    }
}

fn check_fraction(f: f64) -> Result<()> {
    if f > 0.0 && f < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("val_fraction must lie in (0, 1), got {f}")))
    }
}

/// Draws one template per class uniformly in `[0, 1]`, then emits
/// `per_class` samples `clamp(template + N(0, noise²))` per class, classes
/// interleaved so the label histogram is exactly balanced.
pub fn gen_synthetic_dataset<T: Scalar>(spec: &DatasetSpec) -> Result<Dataset<T>> {
    spec.validate()?;
    let DatasetSpec::Synthetic {
        classes,
        image,
        per_class,
        noise,
        seed,
        ..
    } = *spec
    else {
        return Err(Error::Config("not a synthetic dataset spec".into()));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels: usize = image.iter().product();
    let templates: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..pixels).map(|_| rng.random::<f64>()).collect())
        .collect();
    let normal = Normal::new(0.0, noise).map_err(|e| Error::Config(e.to_string()))?;
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * pixels);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..per_class {
        for (c, t) in templates.iter().enumerate() {
            data.extend(t.iter().map(|&v| {
                let v = if noise > 0.0 { v + normal.sample(&mut rng) } else { v };
                T::of(v.clamp(0.0, 1.0))
            }));
            labels.push(c);
        }
    }
    Dataset::new(Tensor::new(vec![n, image[0], image[1], image[2]], data)?, labels, classes)
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let b = bytes.get(at..at + 4).ok_or(IdxError::Truncated {
        needed: at + 4,
        available: bytes.len(),
    })?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Decodes IDX image bytes into `[n, c, h, w]` pixels scaled to `[0, 1]`.
pub fn parse_idx_images<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let magic = read_u32(bytes, 0)?;
    let dims: Vec<usize> = match magic {
        IDX_IMAGES_MAGIC => {
            let d = (0..3).map(|i| read_u32(bytes, 4 + 4 * i).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            vec![d[0], 1, d[1], d[2]]
        }
        IDX_IMAGES4_MAGIC => (0..4).map(|i| read_u32(bytes, 4 + 4 * i).map(|v| v as usize)).collect::<Result<Vec<_>>>()?,
        found => {
            return Err(IdxError::BadMagic {
                expected: IDX_IMAGES_MAGIC,
                found,
            }
            .into())
        }
    };
    let header = if magic == IDX_IMAGES_MAGIC { 16 } else { 20 };
    let count: usize = dims.iter().product();
    let body = &bytes[header.min(bytes.len())..];
    if body.len() < count {
        return Err(IdxError::Truncated {
            needed: header + count,
            available: bytes.len(),
        }
        .into());
    }
    let scale = T::of(1.0 / 255.0);
    Tensor::new(dims, body[..count].iter().map(|&b| T::of(b as f64) * scale).collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(IdxError::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        }
        .into());
    }
    let n = read_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(IdxError::Truncated {
            needed: 8 + n,
            available: bytes.len(),
        }
        .into());
    }
    Ok(body[..n].iter().map(|&b| b as usize).collect())
}

/// Loads a pair of big-endian IDX files.
pub fn load_idx<T: Scalar>(images: &Path, labels: &Path) -> Result<Dataset<T>> {
    let ib = fs::read(images).map_err(|e| Error::io(images, e))?;
    let lb = fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let x = parse_idx_images::<T>(&ib)?;
    let y = parse_idx_labels(&lb)?;
    if x.shape()[0] != y.len() {
        return Err(IdxError::CountMismatch {
            images: x.shape()[0],
            labels: y.len(),
        }
        .into());
    }
    let classes = y.iter().max().map_or(0, |&m| m + 1);
    Dataset::new(x, y, classes)
}

/// Writes `data` as IDX files, quantizing pixels to bytes. Single-channel
/// images use the classic 3-D layout.
pub fn write_idx<T: Scalar>(data: &Dataset<T>, images: &Path, labels: &Path) -> Result<()> {
    let s = data.images.shape();
    let mut ib = Vec::with_capacity(20 + data.images.len());
    if s[1] == 1 {
        ib.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        for d in [s[0], s[2], s[3]] {
            ib.extend_from_slice(&(d as u32).to_be_bytes());
        }
    } else {
        ib.extend_from_slice(&IDX_IMAGES4_MAGIC.to_be_bytes());
        for &d in s {
            ib.extend_from_slice(&(d as u32).to_be_bytes());
        }
    }
    ib.extend(data.images.data().iter().map(|v| (v.f64().clamp(0.0, 1.0) * 255.0).round() as u8));
    if data.classes > 256 {
        return Err(Error::InvalidInput("IDX labels are single bytes; at most 256 classes".into()));
    }
    let mut lb = Vec::with_capacity(8 + data.len());
    lb.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lb.extend_from_slice(&(data.len() as u32).to_be_bytes());
    lb.extend(data.labels.iter().map(|&l| l as u8));
    fs::write(images, ib).map_err(|e| Error::io(images, e))?;
    fs::write(labels, lb).map_err(|e| Error::io(labels, e))?;
    Ok(())
}
