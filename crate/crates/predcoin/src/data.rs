//! Datasets: synthetic generators and the IDX image/label loader.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// A labeled dataset of points in `[0,1]^d`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    /// Split off the first `n` samples into one dataset, the rest in another.
    pub fn split_at(mut self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let tail_inputs = self.inputs.split_off(n);
        let tail_labels = self.labels.split_off(n);
        let head = Dataset {
            inputs: self.inputs,
            labels: self.labels,
            num_classes: self.num_classes,
        };
        let tail = Dataset {
            inputs: tail_inputs,
            labels: tail_labels,
            num_classes: head.num_classes,
        };
        (head, tail)
    }
}

/// Declarative dataset source, serializable into experiment configs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum DatasetSpec {
    /// Gaussian blobs: one isotropic Gaussian per class, means `separation`
    /// standard deviations apart along seeded random directions.
    Blobs {
        dim: usize,
        classes: usize,
        n: usize,
        separation: f64,
        #[serde(default = "default_sigma")]
        sigma: f64,
        seed: u64,
        /// Separate stream for sample draws; `seed` alone fixes the class
        /// means, so two specs sharing `seed` describe the same task.
        #[serde(default)]
        sample_seed: Option<u64>,
    },
    /// Smooth low-frequency class prototypes on a square grid with pixel
    /// noise. A self-contained stand-in for small image tasks; `contrast`
    /// sets the prototype amplitude around mid-gray and controls task
    /// difficulty relative to `noise`.
    Patterns {
        side: usize,
        classes: usize,
        n: usize,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default = "default_contrast")]
        contrast: f64,
        seed: u64,
        /// Separate stream for sample draws; `seed` alone fixes the class
        /// prototypes.
        #[serde(default)]
        sample_seed: Option<u64>,
    },
    /// IDX image/label file pair.
    Idx {
        images: String,
        labels: String,
        limit: usize,
    },
}

fn default_sigma() -> f64 {
    0.05
}

fn default_noise() -> f64 {
    0.12
}

fn default_contrast() -> f64 {
    0.4
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::Blobs {
                dim,
                classes,
                n,
                separation,
                sigma,
                seed,
                sample_seed,
            } => Ok(gaussian_blobs_with(
                *dim,
                *classes,
                *n,
                *separation,
                *sigma,
                *seed,
                *sample_seed,
            )),
            DatasetSpec::Patterns {
                side,
                classes,
                n,
                noise,
                contrast,
                seed,
                sample_seed,
            } => Ok(synthetic_patterns_with(
                *side, *classes, *n, *noise, *contrast, *seed, *sample_seed,
            )),
            DatasetSpec::Idx {
                images,
                labels,
                limit,
            } => load_idx(Path::new(images), Path::new(labels), *limit),
        }
    }
}

/// `classes` isotropic Gaussians in `[0,1]^dim`, `n` samples total spread
/// round-robin over classes. Means sit `separation * sigma` apart from the
/// shared center along seeded random unit directions; samples clip to the
/// unit cube.
pub fn gaussian_blobs(
    dim: usize,
    classes: usize,
    n: usize,
    separation: f64,
    sigma: f64,
    seed: u64,
) -> Dataset {
    gaussian_blobs_with(dim, classes, n, separation, sigma, seed, None)
}

/// Like [`gaussian_blobs`], with sample draws optionally taken from their
/// own stream so one task (fixed means) can emit disjoint splits.
pub fn gaussian_blobs_with(
    dim: usize,
    classes: usize,
    n: usize,
    separation: f64,
    sigma: f64,
    seed: u64,
    sample_seed: Option<u64>,
) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Mean directions are orthonormalized so every pair of class means sits
    // `separation * sigma` apart (random fallback once directions run out).
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut v = random_unit(&mut rng, dim);
        for prev in &dirs {
            let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (vi, pi) in v.iter_mut().zip(prev) {
                *vi -= dot * pi;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            for vi in v.iter_mut() {
                *vi /= norm;
            }
        } else {
            v = random_unit(&mut rng, dim);
        }
        dirs.push(v);
    }
    let radius = separation * sigma / std::f64::consts::SQRT_2;
    let means: Vec<Vec<f64>> = dirs
        .iter()
        .map(|dir| dir.iter().map(|&d| 0.5 + radius * d).collect())
        .collect();
    let mut rng = match sample_seed {
        Some(s) => ChaCha8Rng::seed_from_u64(s),
        None => rng,
    };
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        let x: Vec<f64> = means[k]
            .iter()
            .map(|&m| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (m + sigma * z).clamp(0.0, 1.0)
            })
            .collect();
        inputs.push(x);
        labels.push(k);
    }
    Dataset {
        inputs,
        labels,
        num_classes: classes,
    }
}

/// Smooth per-class prototypes built from a few random low-frequency cosine
/// modes on a `side x side` grid, sampled with i.i.d. pixel noise.
pub fn synthetic_patterns(
    side: usize,
    classes: usize,
    n: usize,
    noise: f64,
    contrast: f64,
    seed: u64,
) -> Dataset {
    synthetic_patterns_with(side, classes, n, noise, contrast, seed, None)
}

pub fn synthetic_patterns_with(
    side: usize,
    classes: usize,
    n: usize,
    noise: f64,
    contrast: f64,
    seed: u64,
    sample_seed: Option<u64>,
) -> Dataset {
    let dim = side * side;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modes = 8;
    let mut prototypes = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut field = vec![0.0f64; dim];
        for _ in 0..modes {
            let a: f64 = StandardNormal.sample(&mut rng);
            let p = rng.random_range(0..4) as f64;
            let q = rng.random_range(0..4) as f64;
            for i in 0..side {
                for j in 0..side {
                    let ci = (std::f64::consts::PI * p * (i as f64 + 0.5) / side as f64).cos();
                    let cj = (std::f64::consts::PI * q * (j as f64 + 0.5) / side as f64).cos();
                    field[i * side + j] += a * ci * cj;
                }
            }
        }
        // Squash around mid-gray; the amplitude sets class separability.
        let proto: Vec<f64> = field
            .iter()
            .map(|&v| 0.5 + contrast.min(0.5) * (1.5 * v).tanh())
            .collect();
        prototypes.push(proto);
    }
    let mut rng = match sample_seed {
        Some(s) => ChaCha8Rng::seed_from_u64(s),
        None => rng,
    };
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        let x: Vec<f64> = prototypes[k]
            .iter()
            .map(|&m| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (m + noise * z).clamp(0.0, 1.0)
            })
            .collect();
        inputs.push(x);
        labels.push(k);
    }
    Dataset {
        inputs,
        labels,
        num_classes: classes,
    }
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn read_u32_be(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Truncated(what.to_string()),
            _ => Error::Io(e),
        })?;
    Ok(u32::from_be_bytes(buf))
}

/// Load an IDX image/label pair. Pixels are scaled to `[0,1]` as `v / 255`;
/// at most `limit` items are read (0 means all).
pub fn load_idx(images_path: &Path, labels_path: &Path, limit: usize) -> Result<Dataset> {
    let mut ir = BufReader::new(File::open(images_path)?);
    let magic = read_u32_be(&mut ir, "images magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_IMAGES_MAGIC.to_be_bytes(),
            actual: magic.to_be_bytes(),
        });
    }
    let n_images = read_u32_be(&mut ir, "image count")? as usize;
    let rows = read_u32_be(&mut ir, "rows")? as usize;
    let cols = read_u32_be(&mut ir, "cols")? as usize;

    let mut lr = BufReader::new(File::open(labels_path)?);
    let magic = read_u32_be(&mut lr, "labels magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_LABELS_MAGIC.to_be_bytes(),
            actual: magic.to_be_bytes(),
        });
    }
    let n_labels = read_u32_be(&mut lr, "label count")? as usize;
    if n_labels != n_images {
        return Err(Error::DimensionMismatch {
            expected: n_images,
            actual: n_labels,
        });
    }

    let take = if limit == 0 { n_images } else { limit.min(n_images) };
    let dim = rows * cols;
    let mut inputs = Vec::with_capacity(take);
    let mut pixel_buf = vec![0u8; dim];
    for i in 0..take {
        ir.read_exact(&mut pixel_buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Truncated(format!("image {i}")),
            _ => Error::Io(e),
        })?;
        inputs.push(pixel_buf.iter().map(|&b| b as f64 / 255.0).collect());
    }
    let mut label_buf = vec![0u8; take];
    lr.read_exact(&mut label_buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated("labels".to_string()),
        _ => Error::Io(e),
    })?;
    let labels: Vec<usize> = label_buf.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(1, |&m| m + 1);
    Ok(Dataset {
        inputs,
        labels,
        num_classes,
    })
}
