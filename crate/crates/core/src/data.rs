//! Dataset ingestion and encoding: IDX (MNIST container) loading with
//! transparent gzip, complement coding, and seeded synthetic cluster data
//! for oracle tests.

use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::mat::Mat;

/// Dedicated RNG stream for synthetic data, so generators never share a
/// sequence with mask initialization or epoch shuffling at equal seeds.
pub(crate) const SYNTH_STREAM: u64 = 0x7379_6e74;

const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;
const IDX_MAGIC_LABELS: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: wrong IDX magic 0x{found:08x} (expected 0x{expected:08x})")]
    WrongMagic { path: String, found: u32, expected: u32 },
    #[error("{path}: truncated (need {needed} bytes, have {got})")]
    Truncated { path: String, needed: usize, got: usize },
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("dataset is already complement-encoded")]
    AlreadyEncoded,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Encoding {
    Raw,
    /// Each feature x is stored as the pair (x, 1−x): one two-unit input
    /// hypercolumn per original feature.
    Complement,
}

/// Immutable sample store. Features are row-major samples × features in
/// [0,1]; labels are optional class ids.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub features: Mat<f32>,
    pub labels: Option<Vec<u32>>,
    pub encoding: Encoding,
}

impl Dataset {
    pub fn n_samples(&self) -> usize {
        self.features.rows()
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    /// Smallest class count covering every label (max id + 1).
    pub fn n_classes(&self) -> usize {
        match &self.labels {
            Some(l) => l.iter().copied().max().map_or(0, |m| m as usize + 1),
            None => 0,
        }
    }

    /// Rows `start..start + len`, clamped to the sample count.
    pub fn subset(&self, start: usize, len: usize) -> Dataset {
        let start = start.min(self.n_samples());
        let end = (start + len).min(self.n_samples());
        let mut features = Mat::zeros(end - start, self.n_features());
        for (dst, src) in (start..end).enumerate() {
            features.row_mut(dst).copy_from_slice(self.features.row(src));
        }
        Dataset {
            features,
            labels: self.labels.as_ref().map(|l| l[start..end].to_vec()),
            encoding: self.encoding,
        }
    }

    /// Re-encode every feature x as the pair (x, 1−x).
    ///
    /// Doubles the feature count; each consecutive pair sums to exactly 1.0
    /// in f32 (1−x is Sterbenz-exact for x ≥ 0.5, and for x < 0.5 the
    /// rounding error of 1−x is below half an ulp of the sum).
    pub fn encode_complement(self) -> Result<Dataset, DataError> {
        if self.encoding == Encoding::Complement {
            return Err(DataError::AlreadyEncoded);
        }
        let (n, f) = (self.n_samples(), self.n_features());
        let mut features = Mat::zeros(n, 2 * f);
        for b in 0..n {
            let src = self.features.row(b);
            let dst = features.row_mut(b);
            for (i, &x) in src.iter().enumerate() {
                dst[2 * i] = x;
                dst[2 * i + 1] = 1.0 - x;
            }
        }
        Ok(Dataset {
            features,
            labels: self.labels,
            encoding: Encoding::Complement,
        })
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, DataError> {
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let raw = std::fs::read(path).map_err(io_err)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(io_err)?;
        return Ok(out);
    }
    Ok(raw)
}

fn be_u32(bytes: &[u8], off: usize, path: &str) -> Result<u32, DataError> {
    let end = off + 4;
    if bytes.len() < end {
        return Err(DataError::Truncated {
            path: path.to_string(),
            needed: end,
            got: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes(bytes[off..end].try_into().unwrap()))
}

fn check_magic(bytes: &[u8], expected: u32, path: &str) -> Result<(), DataError> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(DataError::WrongMagic {
            path: path.to_string(),
            found,
            expected,
        });
    }
    Ok(())
}

/// Load an IDX image/label pair (the standard MNIST container, big-endian),
/// accepting gzip-compressed files. Pixels are scaled by 1/255 into [0,1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let ipath = images_path.display().to_string();
    let ibytes = read_maybe_gz(images_path)?;
    check_magic(&ibytes, IDX_MAGIC_IMAGES, &ipath)?;
    let n = be_u32(&ibytes, 4, &ipath)? as usize;
    let rows = be_u32(&ibytes, 8, &ipath)? as usize;
    let cols = be_u32(&ibytes, 12, &ipath)? as usize;
    let pixels = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or(DataError::Truncated {
            path: ipath.clone(),
            needed: usize::MAX,
            got: ibytes.len(),
        })?;
    if ibytes.len() < 16 + pixels {
        return Err(DataError::Truncated {
            path: ipath,
            needed: 16 + pixels,
            got: ibytes.len(),
        });
    }

    let lpath = labels_path.display().to_string();
    let lbytes = read_maybe_gz(labels_path)?;
    check_magic(&lbytes, IDX_MAGIC_LABELS, &lpath)?;
    let n_labels = be_u32(&lbytes, 4, &lpath)? as usize;
    if lbytes.len() < 8 + n_labels {
        return Err(DataError::Truncated {
            path: lpath,
            needed: 8 + n_labels,
            got: lbytes.len(),
        });
    }
    if n != n_labels {
        return Err(DataError::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }

    let mut features = Mat::zeros(n, rows * cols);
    for (dst, src) in features
        .as_mut_slice()
        .iter_mut()
        .zip(&ibytes[16..16 + pixels])
    {
        *dst = f32::from(*src) / 255.0;
    }
    let labels = lbytes[8..8 + n_labels].iter().map(|&b| u32::from(b)).collect();
    Ok(Dataset {
        features,
        labels: Some(labels),
        encoding: Encoding::Raw,
    })
}

/// Labeled Gaussian blobs around `n_clusters` seeded centroids, clipped to
/// [0,1]; labels are assigned round-robin so every prefix is near-balanced.
pub fn make_synthetic_clusters(
    seed: u64,
    n_clusters: usize,
    n_samples: usize,
    n_features: usize,
    spread: f64,
) -> Dataset {
    assert!(
        n_clusters > 0 && n_samples > 0 && n_features > 0 && spread >= 0.0,
        "synthetic cluster parameters must be positive"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SYNTH_STREAM);

    let mut centroids = Mat::zeros(n_clusters, n_features);
    for v in centroids.as_mut_slice() {
        *v = rng.random_range(0.0..1.0f64);
    }
    let noise = Normal::new(0.0, spread).expect("finite non-negative spread");

    let mut features = Mat::zeros(n_samples, n_features);
    let mut labels = Vec::with_capacity(n_samples);
    for b in 0..n_samples {
        let c = b % n_clusters;
        labels.push(c as u32);
        let row = features.row_mut(b);
        for (x, &mu) in row.iter_mut().zip(centroids.row(c)) {
            *x = (mu + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
    }
    Dataset {
        features,
        labels: Some(labels),
        encoding: Encoding::Raw,
    }
}
