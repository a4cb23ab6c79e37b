//! Dataset loading: IDX binaries (MNIST layout), CSV files with a trailing
//! target column, and seeded synthetic generators.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::linalg::DenseMatrix;
use crate::rng::{stream_rng, STREAM_DATA};
use crate::{Error, Result};

pub const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;
pub const IDX_MAGIC_LABELS: u32 = 0x0000_0801;

/// Where a dataset comes from. Synthetic sources draw from the experiment
/// seed's data stream, so the same seed always yields the same arrays.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    /// IDX image file, optionally paired with an IDX label file. Without
    /// labels the dataset is used in autoencoder mode (targets = inputs).
    Idx { images: String, labels: Option<String> },
    /// CSV with a header row; every column but the last is a feature, the
    /// last is the target value.
    Csv { path: String },
    /// Inputs x ~ U(-1,1)^dim, targets y = tanh(W x) for a fixed random
    /// matrix W drawn from the same stream.
    SyntheticRegression { dim: usize, out_dim: usize, samples: usize },
    /// Low-rank signal: z ~ U(-1,1)^latent, x = tanh(M z) for a fixed
    /// random M; targets equal inputs.
    SyntheticAutoencoder { dim: usize, latent: usize, samples: usize },
}

/// Inputs are `d x N`; targets are either raw class labels (one row) or
/// dense target vectors.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: DenseMatrix,
    pub targets: DenseMatrix,
    /// True when `targets` holds integer class labels in one row.
    pub labels: bool,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Keeps the first `n` samples.
    pub fn truncate(&mut self, n: usize) {
        if n < self.len() {
            self.inputs = self.inputs.columns(0, n).clone_owned();
            self.targets = self.targets.columns(0, n).clone_owned();
        }
    }

    /// One-hot encodes label targets into `classes` rows; dense targets are
    /// returned unchanged.
    pub fn one_hot_targets(&self, classes: usize) -> Result<DenseMatrix> {
        if !self.labels {
            return Ok(self.targets.clone());
        }
        let n = self.len();
        let mut out = DenseMatrix::zeros(classes, n);
        for b in 0..n {
            let label = self.targets[(0, b)] as usize;
            if label >= classes {
                return Err(Error::DimMismatch { expected: classes, got: label + 1 });
            }
            out[(label, b)] = 1.0;
        }
        Ok(out)
    }
}

fn read_u32_be(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::TruncatedFile { expected: end, got: bytes.len() });
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Parses an IDX image file into a `pixels x N` matrix scaled to [0, 1].
pub fn parse_idx_images(bytes: &[u8]) -> Result<DenseMatrix> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IDX_MAGIC_IMAGES {
        return Err(Error::BadMagic { got: magic });
    }
    let n = read_u32_be(bytes, 4)? as usize;
    let rows = read_u32_be(bytes, 8)? as usize;
    let cols = read_u32_be(bytes, 12)? as usize;
    let pixels = rows * cols;
    let expected = 16 + n * pixels;
    if bytes.len() < expected {
        return Err(Error::TruncatedFile { expected, got: bytes.len() });
    }
    let data = &bytes[16..expected];
    Ok(DenseMatrix::from_fn(pixels, n, |r, c| data[c * pixels + r] as f64 / 255.0))
}

/// Parses an IDX label file into one row of class indices.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<DenseMatrix> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IDX_MAGIC_LABELS {
        return Err(Error::BadMagic { got: magic });
    }
    let n = read_u32_be(bytes, 4)? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(Error::TruncatedFile { expected, got: bytes.len() });
    }
    let data = &bytes[8..expected];
    Ok(DenseMatrix::from_fn(1, n, |_, c| data[c] as f64))
}

/// Parses a CSV with a header row; the last column is the target.
pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::BadConfig("empty csv".into()))?;
    let width = header.split(',').count();
    if width < 2 {
        return Err(Error::BadConfig("csv needs at least two columns".into()));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in lines.enumerate() {
        let values: Vec<f64> = line
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::BadConfig(format!("csv row {}: bad number `{v}`", i + 2)))
            })
            .collect::<Result<_>>()?;
        if values.len() != width {
            return Err(Error::DimMismatch { expected: width, got: values.len() });
        }
        rows.push(values);
    }
    let n = rows.len();
    let d = width - 1;
    let inputs = DenseMatrix::from_fn(d, n, |r, c| rows[c][r]);
    let targets = DenseMatrix::from_fn(1, n, |_, c| rows[c][d]);
    Ok(Dataset { inputs, targets, labels: false })
}

/// Loads a dataset. Synthetic sources are generated from `seed`'s data
/// stream; file sources read from disk relative to the current directory.
pub fn load_dataset(source: &DataSource, seed: u64) -> Result<Dataset> {
    match source {
        DataSource::Idx { images, labels } => {
            let image_bytes = fs::read(Path::new(images))?;
            let inputs = parse_idx_images(&image_bytes)?;
            match labels {
                Some(path) => {
                    let label_bytes = fs::read(Path::new(path))?;
                    let targets = parse_idx_labels(&label_bytes)?;
                    if targets.ncols() != inputs.ncols() {
                        return Err(Error::DimMismatch {
                            expected: inputs.ncols(),
                            got: targets.ncols(),
                        });
                    }
                    Ok(Dataset { inputs, targets, labels: true })
                }
                None => Ok(Dataset { targets: inputs.clone(), inputs, labels: false }),
            }
        }
        DataSource::Csv { path } => parse_csv(&fs::read_to_string(Path::new(path))?),
        DataSource::SyntheticRegression { dim, out_dim, samples } => {
            let mut rng = stream_rng(seed, STREAM_DATA);
            let w = DenseMatrix::from_fn(*out_dim, *dim, |_, _| rng.gen_range(-1.0..1.0));
            let inputs = DenseMatrix::from_fn(*dim, *samples, |_, _| rng.gen_range(-1.0..1.0));
            let targets = (&w * &inputs).map(f64::tanh);
            Ok(Dataset { inputs, targets, labels: false })
        }
        DataSource::SyntheticAutoencoder { dim, latent, samples } => {
            let mut rng = stream_rng(seed, STREAM_DATA);
            let m = DenseMatrix::from_fn(*dim, *latent, |_, _| rng.gen_range(-1.0..1.0));
            let z = DenseMatrix::from_fn(*latent, *samples, |_, _| rng.gen_range(-1.0..1.0));
            let inputs = (&m * z).map(f64::tanh);
            Ok(Dataset { targets: inputs.clone(), inputs, labels: false })
        }
    }
}
