//! Labeled sample sets and their sources: IDX ubyte pairs, seeded synthetic
//! class clusters, and CSV manifests of raw `f32` CHW files.

use std::fs;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{SeededRng, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{}: bad magic number {found:#010x} (expected {expected:#010x})", .path.display())]
    BadMagic { path: PathBuf, expected: u32, found: u32 },
    #[error("{}: truncated, expected {expected} bytes but found {actual}", .path.display())]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {msg}", .path.display())]
    Manifest { path: PathBuf, line: usize, msg: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// In-memory labeled samples of a fixed `[channels, height, width]` shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    sample_shape: [usize; 3],
    data: Vec<f32>,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(
        sample_shape: [usize; 3],
        data: Vec<f32>,
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self, DataError> {
        let per: usize = sample_shape.iter().product();
        if per == 0 {
            return Err(DataError::Invalid(format!(
                "sample shape {sample_shape:?} has a zero axis"
            )));
        }
        if data.len() != per * labels.len() {
            return Err(DataError::CountMismatch {
                images: data.len() / per,
                labels: labels.len(),
            });
        }
        if labels.is_empty() {
            return Err(DataError::Invalid("no samples".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::Invalid(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            sample_shape,
            data,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        self.sample_shape
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let per = self.sample_len();
        &self.data[i * per..(i + 1) * per]
    }

    fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    /// Stacks the given samples into an `N x C x H x W` tensor.
    pub fn batch(&self, idx: &[usize]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(idx.len() * self.sample_len());
        for &i in idx {
            data.extend_from_slice(self.sample(i));
        }
        let [c, h, w] = self.sample_shape;
        Tensor::new(vec![idx.len(), c, h, w], data).expect("non-empty batch")
    }

    pub fn batch_labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self, DataError> {
        Self::new(
            self.sample_shape,
            self.batch(idx).into_data(),
            self.batch_labels(idx),
            self.classes,
        )
    }

    /// First `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Result<Self, DataError> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Raw sample buffer, row-major over samples.
    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn idx_header(path: &Path, bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>, DataError> {
    let header = 4 + 4 * dims;
    if bytes.len() < 4 {
        return Err(DataError::Truncated {
            path: path.into(),
            expected: header,
            actual: bytes.len(),
        });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(DataError::BadMagic {
            path: path.into(),
            expected: magic,
            found,
        });
    }
    if bytes.len() < header {
        return Err(DataError::Truncated {
            path: path.into(),
            expected: header,
            actual: bytes.len(),
        });
    }
    let shape: Vec<usize> = (0..dims).map(|d| be_u32(bytes, 4 + 4 * d) as usize).collect();
    let expected = header + shape.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            path: path.into(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok(shape)
}

/// Parses an IDX ubyte image/label pair. Pixels are scaled to `[0, 1]`;
/// samples come out as `1 x rows x cols`.
pub fn load_idx(images: &Path, labels: &Path, limit: Option<usize>) -> Result<Dataset, DataError> {
    let ib = read(images)?;
    let lb = read(labels)?;
    let ishape = idx_header(images, &ib, IDX_IMAGES_MAGIC, 3)?;
    let lshape = idx_header(labels, &lb, IDX_LABELS_MAGIC, 1)?;
    if ishape[0] != lshape[0] {
        return Err(DataError::CountMismatch {
            images: ishape[0],
            labels: lshape[0],
        });
    }
    let n = limit.map_or(ishape[0], |l| l.min(ishape[0]));
    let per = ishape[1] * ishape[2];
    let data = ib[16..16 + n * per].iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<usize> = lb[8..8 + n].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    Dataset::new([1, ishape[1], ishape[2]], data, labels, classes)
}

/// Seeded Gaussian class clusters shaped like images.
///
/// Each class owns a smooth prototype: standard-normal values on a coarse
/// `grid x grid` lattice per channel, upsampled by nearest neighbor. A sample is
/// its prototype plus i.i.d. `N(0, noise^2)` pixel noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobsConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    pub shape: [usize; 3],
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_noise() -> f64 {
    1.0
}

fn default_grid() -> usize {
    4
}

impl BlobsConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let [c, h, w] = self.shape;
        if self.classes < 2 || self.train_per_class == 0 || self.eval_per_class == 0 {
            return Err(DataError::Invalid(
                "synthetic blobs need at least 2 classes and 1 sample per class per split".into(),
            ));
        }
        if c == 0 || h == 0 || w == 0 || self.grid == 0 {
            return Err(DataError::Invalid(format!(
                "bad blob shape {:?} / grid {}",
                self.shape, self.grid
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(DataError::Invalid(format!(
                "noise must be finite and non-negative, got {}",
                self.noise
            )));
        }
        Ok(())
    }
}

/// Train and eval splits drawn from the same class prototypes.
pub fn synthetic_blobs(cfg: &BlobsConfig) -> Result<(Dataset, Dataset), DataError> {
    cfg.validate()?;
    let [c, h, w] = cfg.shape;
    let g = cfg.grid;
    let mut proto_rng = SeededRng::new(cfg.seed, "blobs/prototypes");
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let prototypes: Vec<Vec<f32>> = (0..cfg.classes)
        .map(|_| {
            let coarse: Vec<f64> = (0..c * g * g).map(|_| std.sample(&mut proto_rng)).collect();
            let mut img = Vec::with_capacity(c * h * w);
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        img.push(coarse[(ch * g + y * g / h) * g + x * g / w] as f32);
                    }
                }
            }
            img
        })
        .collect();
    let noise = Normal::new(0.0, cfg.noise).expect("validated noise");
    let draw = |split: &str, per_class: usize| {
        let mut rng = SeededRng::new(cfg.seed, format!("blobs/{split}"));
        let mut data = Vec::with_capacity(cfg.classes * per_class * c * h * w);
        let mut labels = Vec::with_capacity(cfg.classes * per_class);
        // interleave classes so any prefix is roughly balanced
        for _ in 0..per_class {
            for (label, proto) in prototypes.iter().enumerate() {
                data.extend(proto.iter().map(|&p| p + noise.sample(&mut rng) as f32));
                labels.push(label);
            }
        }
        Dataset::new(cfg.shape, data, labels, cfg.classes)
    };
    Ok((draw("train", cfg.train_per_class)?, draw("eval", cfg.eval_per_class)?))
}

/// Reads a CSV manifest with header `path,label,split`; each path (relative to
/// the manifest) holds `C*H*W` little-endian `f32` values. `split` is `train` or `eval`.
pub fn load_manifest(
    manifest: &Path,
    sample_shape: [usize; 3],
    classes: usize,
) -> Result<(Dataset, Dataset), DataError> {
    let text = fs::read_to_string(manifest).map_err(|source| DataError::Io {
        path: manifest.into(),
        source,
    })?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let per: usize = sample_shape.iter().product();
    let err = |line: usize, msg: String| DataError::Manifest {
        path: manifest.into(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, header)) if header.trim() == "path,label,split" => {}
        _ => return Err(err(1, "expected header `path,label,split`".into())),
    }
    let mut splits: [(Vec<f32>, Vec<usize>); 2] = Default::default();
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [path, label, split] = fields[..] else {
            return Err(err(i + 1, format!("expected 3 fields, found {}", fields.len())));
        };
        let label: usize = label.parse().map_err(|_| err(i + 1, format!("bad label `{label}`")))?;
        let slot = match split {
            "train" => 0,
            "eval" => 1,
            other => return Err(err(i + 1, format!("split must be train or eval, got `{other}`"))),
        };
        let file = base.join(path);
        let bytes = read(&file)?;
        if bytes.len() != per * 4 {
            return Err(DataError::Truncated {
                path: file,
                expected: per * 4,
                actual: bytes.len(),
            });
        }
        splits[slot].0.extend(
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))),
        );
        splits[slot].1.push(label);
    }
    let [(td, tl), (ed, el)] = splits;
    Ok((
        Dataset::new(sample_shape, td, tl, classes)?,
        Dataset::new(sample_shape, ed, el, classes)?,
    ))
}
