//! Synthetic dataset generation, the `KANT` binary tensor format, and
//! CSV manifest ingestion.
//!
//! `KANT` layout (bit-exact contract): magic `KANT`, version `u8 = 1`,
//! dtype `u8` (0 = f32, 1 = f64), ndim `u8`, reserved `u8 = 0`, then
//! `ndim` little-endian `u64` dims, then the raw little-endian row-major
//! payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{KanetError, Result};
use crate::tensor::{Dtype, Scalar, Tensor};

pub const KANT_MAGIC: [u8; 4] = *b"KANT";
pub const KANT_VERSION: u8 = 1;
const HEADER_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images with aligned labels; all images share one shape.
#[derive(Debug, Clone)]
pub struct LabeledDataset<T> {
    pub images: Vec<Tensor<T>>,
    pub labels: Vec<u32>,
    pub split: Split,
}

impl<T: Scalar> LabeledDataset<T> {
    pub fn new(images: Vec<Tensor<T>>, labels: Vec<u32>, split: Split) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(KanetError::Argument(format!(
                "{} images vs {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(first) = images.first() {
            if images.iter().any(|img| img.shape() != first.shape()) {
                return Err(KanetError::shape("dataset", "images of mixed shapes".to_string()));
            }
        }
        Ok(LabeledDataset { images, labels, split })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Sample indices grouped by class, ascending class id.
    pub fn class_indices(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &label) in self.labels.iter().enumerate() {
            map.entry(label).or_default().push(i);
        }
        map
    }

    /// Subset by sample indices, keeping the given order.
    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Self> {
        let images = indices.iter().map(|&i| self.images[i].clone()).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        LabeledDataset::new(images, labels, split)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Std of the per-class pixel template.
    pub sigma_between: f64,
    /// Std of per-sample noise around the template.
    pub sigma_within: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_classes: 12,
            train_per_class: 30,
            test_per_class: 20,
            image_size: 16,
            channels: 1,
            sigma_between: 1.0,
            sigma_within: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(KanetError::Config("synthetic counts must be positive".into()));
        }
        if !(self.sigma_between > 0.0) || self.sigma_within < 0.0 {
            return Err(KanetError::Config(
                "sigma_between must be > 0 and sigma_within >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Gaussian-blob classes in pixel space: one template per class, samples
/// are template plus within-class noise. Train and test are disjoint by
/// construction.
pub fn generate_synthetic<T: Scalar>(
    cfg: &SyntheticConfig,
) -> Result<(LabeledDataset<T>, LabeledDataset<T>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shape = vec![cfg.channels, cfg.image_size, cfg.image_size];
    let sb = T::from_f64(cfg.sigma_between);
    let sw = T::from_f64(cfg.sigma_within);

    let mut train_images = Vec::with_capacity(cfg.num_classes * cfg.train_per_class);
    let mut train_labels = Vec::new();
    let mut test_images = Vec::with_capacity(cfg.num_classes * cfg.test_per_class);
    let mut test_labels = Vec::new();

    for class in 0..cfg.num_classes as u32 {
        let template = Tensor::<T>::randn(shape.clone(), sb, &mut rng);
        let mut draw = |n: usize, images: &mut Vec<Tensor<T>>, labels: &mut Vec<u32>| {
            for _ in 0..n {
                let noise = Tensor::<T>::randn(shape.clone(), sw, &mut rng);
                let data = template
                    .data()
                    .iter()
                    .zip(noise.data())
                    .map(|(&t, &n)| t + n)
                    .collect();
                images.push(Tensor::new(shape.clone(), data).expect("template shape"));
                labels.push(class);
            }
        };
        draw(cfg.train_per_class, &mut train_images, &mut train_labels);
        draw(cfg.test_per_class, &mut test_images, &mut test_labels);
    }

    Ok((
        LabeledDataset::new(train_images, train_labels, Split::Train)?,
        LabeledDataset::new(test_images, test_labels, Split::Test)?,
    ))
}

// ── KANT binary tensor format ────────────────────────────────────────

/// Appends one encoded tensor record.
pub fn write_tensor<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) -> Result<()> {
    let ndim = t.shape().len();
    if ndim > u8::MAX as usize {
        return Err(KanetError::Format(format!("{ndim} dims exceed format limit")));
    }
    out.extend_from_slice(&KANT_MAGIC);
    out.push(KANT_VERSION);
    out.push(T::DTYPE.code());
    out.push(ndim as u8);
    out.push(0); // reserved
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&t.to_le_bytes());
    Ok(())
}

/// Decodes one tensor record from the front of `bytes`, returning it and
/// the number of bytes consumed. Never panics on malformed input.
pub fn read_tensor<T: Scalar>(bytes: &[u8]) -> Result<(Tensor<T>, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(KanetError::Format(format!(
            "truncated header: {} of {HEADER_LEN} bytes",
            bytes.len()
        )));
    }
    if bytes[0..4] != KANT_MAGIC {
        return Err(KanetError::Format("bad magic".into()));
    }
    if bytes[4] != KANT_VERSION {
        return Err(KanetError::Format(format!("unsupported version {}", bytes[4])));
    }
    let dtype = Dtype::from_code(bytes[5])?;
    if dtype != T::DTYPE {
        return Err(KanetError::Format(format!(
            "dtype {:?} in file, {:?} requested",
            dtype,
            T::DTYPE
        )));
    }
    if bytes[7] != 0 {
        return Err(KanetError::Format("reserved byte must be zero".into()));
    }
    let ndim = bytes[6] as usize;
    let dims_end = HEADER_LEN + 8 * ndim;
    if bytes.len() < dims_end {
        return Err(KanetError::Format("truncated dims".into()));
    }
    let mut shape = Vec::with_capacity(ndim);
    let mut numel: usize = 1;
    for i in 0..ndim {
        let raw = u64::from_le_bytes(bytes[HEADER_LEN + 8 * i..HEADER_LEN + 8 * i + 8].try_into().unwrap());
        let dim = usize::try_from(raw)
            .map_err(|_| KanetError::Format(format!("dim {raw} overflows usize")))?;
        numel = numel
            .checked_mul(dim)
            .ok_or_else(|| KanetError::Format("element count overflow".into()))?;
        shape.push(dim);
    }
    let payload = numel
        .checked_mul(T::DTYPE.size_bytes())
        .ok_or_else(|| KanetError::Format("payload size overflow".into()))?;
    let total = dims_end
        .checked_add(payload)
        .ok_or_else(|| KanetError::Format("record size overflow".into()))?;
    if bytes.len() < total {
        return Err(KanetError::Format(format!(
            "payload needs {payload} bytes, {} available",
            bytes.len() - dims_end
        )));
    }
    let elem = T::DTYPE.size_bytes();
    let data: Vec<T> = (0..numel)
        .map(|i| T::read_le(&bytes[dims_end + i * elem..dims_end + (i + 1) * elem]))
        .collect();
    Ok((Tensor::new(shape, data)?, total))
}

/// Decodes a file that must contain exactly one tensor record.
pub fn tensor_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let (t, used) = read_tensor(bytes)?;
    if used != bytes.len() {
        return Err(KanetError::Format(format!(
            "{} trailing bytes after record",
            bytes.len() - used
        )));
    }
    Ok(t)
}

pub fn save_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    tensor_from_bytes(&fs::read(path)?)
}

/// Decodes a concatenated stream of tensor records (checkpoints, library
/// files).
pub fn read_tensor_stream<T: Scalar>(bytes: &[u8]) -> Result<Vec<Tensor<T>>> {
    let mut out = Vec::new();
    let mut offset = 0;
    while offset < bytes.len() {
        let (t, used) = read_tensor(&bytes[offset..])?;
        out.push(t);
        offset += used;
    }
    Ok(out)
}

// ── CSV manifest ─────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub label: u32,
    pub split: Split,
}

/// Parses manifest text: one `tensor_path,label,split` triple per line,
/// blank lines and `#` comments skipped. Errors carry 1-based line
/// numbers.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(KanetError::Manifest {
                line,
                msg: format!("expected 3 fields, got {}", fields.len()),
            });
        }
        if fields[0].is_empty() {
            return Err(KanetError::Manifest { line, msg: "empty tensor path".into() });
        }
        let label: u32 = fields[1].parse().map_err(|_| KanetError::Manifest {
            line,
            msg: format!("bad label {:?}", fields[1]),
        })?;
        let split = match fields[2] {
            "train" => Split::Train,
            "test" => Split::Test,
            other => {
                return Err(KanetError::Manifest {
                    line,
                    msg: format!("split must be train or test, got {other:?}"),
                })
            }
        };
        entries.push(ManifestEntry { path: fields[0].to_string(), label, split });
    }
    Ok(entries)
}

/// Loads a manifest and every tensor it references. Relative paths
/// resolve against the manifest's directory. Returns (train, test).
pub fn load_manifest<T: Scalar>(path: &Path) -> Result<(LabeledDataset<T>, LabeledDataset<T>)> {
    let text = fs::read_to_string(path)?;
    let entries = parse_manifest(&text)?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));

    let mut train_images = Vec::new();
    let mut train_labels = Vec::new();
    let mut test_images = Vec::new();
    let mut test_labels = Vec::new();
    for e in &entries {
        let tensor_path = {
            let p = PathBuf::from(&e.path);
            if p.is_absolute() {
                p
            } else {
                dir.join(p)
            }
        };
        let tensor = load_tensor::<T>(&tensor_path)?;
        match e.split {
            Split::Train => {
                train_images.push(tensor);
                train_labels.push(e.label);
            }
            Split::Test => {
                test_images.push(tensor);
                test_labels.push(e.label);
            }
        }
    }
    Ok((
        LabeledDataset::new(train_images, train_labels, Split::Train)?,
        LabeledDataset::new(test_images, test_labels, Split::Test)?,
    ))
}
