use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{LslaError, Result};
use crate::harness::container::{read_tensor, write_tensor};
use crate::numcore::Tensor;

pub const MANIFEST: &str = "manifest.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Eval => "eval",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Path relative to the dataset root, as written in the manifest.
    pub file: String,
    pub label: usize,
    /// `[h, w, c]`, values in `[0, 1]`.
    pub image: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    /// Taken from the root directory name when it is `train` or `eval`.
    pub split: Option<Split>,
    pub classes: usize,
    pub samples: Vec<Sample>,
}

fn format_err(path: &Path, reason: impl Into<String>) -> LslaError {
    LslaError::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Loads `root/manifest.csv` and every tensor it lists, in manifest order.
/// The class count is one more than the largest label.
pub fn ingest(root: impl AsRef<Path>) -> Result<Dataset> {
    ingest_with_classes(root, None)
}

/// Like [`ingest`], but labels must lie in `[0, classes)`.
pub fn ingest_with_classes(root: impl AsRef<Path>, classes: Option<usize>) -> Result<Dataset> {
    let root = root.as_ref();
    let manifest = root.join(MANIFEST);
    if !manifest.is_file() {
        return Err(LslaError::MissingFile(manifest));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(&manifest)
        .map_err(|e| format_err(&manifest, e.to_string()))?;
    let header = reader.headers().map_err(|e| format_err(&manifest, e.to_string()))?;
    if header.iter().collect::<Vec<_>>() != ["file", "label"] {
        return Err(format_err(&manifest, format!("expected header `file,label`, got `{}`", header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut samples = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| format_err(&manifest, e.to_string()))?;
        let line = i + 2;
        let (Some(file), Some(label), 2) = (record.get(0), record.get(1), record.len()) else {
            return Err(format_err(&manifest, format!("line {line}: expected two fields")));
        };
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| format_err(&manifest, format!("line {line}: label `{label}` is not a non-negative integer")))?;
        if let Some(c) = classes.filter(|&c| label >= c) {
            return Err(LslaError::LabelOutOfRange { label, classes: c });
        }
        let path = root.join(file);
        if !path.is_file() {
            return Err(LslaError::MissingFile(path));
        }
        let image = read_tensor(&path)?;
        if image.rank() != 3 || image.shape()[2] != 3 {
            return Err(format_err(&path, format!("expected an h x w x 3 image, got {:?}", image.shape())));
        }
        if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(format_err(&path, "pixel values must lie in [0, 1]"));
        }
        match &shape {
            Some(s) if s.as_slice() != image.shape() => {
                return Err(format_err(&path, format!("shape {:?} differs from {s:?}", image.shape())))
            }
            None => shape = Some(image.shape().to_vec()),
            _ => {}
        }
        samples.push(Sample {
            file: file.to_string(),
            label,
            image,
        });
    }
    if samples.is_empty() {
        return Err(format_err(&manifest, "manifest lists no samples"));
    }
    let seen = samples.iter().map(|s| s.label).max().expect("non-empty") + 1;
    let split = match root.file_name().and_then(|n| n.to_str()) {
        Some("train") => Some(Split::Train),
        Some("eval") => Some(Split::Eval),
        _ => None,
    };
    Ok(Dataset {
        root: root.to_path_buf(),
        split,
        classes: classes.unwrap_or(seen),
        samples,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Side length of the (square) images.
    pub fn image_size(&self) -> usize {
        self.samples[0].image.shape()[0]
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Stacks samples `idx` into a `[b, h, w, c]` batch.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let shape = self.samples[0].image.shape().to_vec();
        let mut data = Vec::with_capacity(idx.len() * self.samples[0].image.numel());
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| LslaError::IndexOutOfRange(format!("sample {i} of {}", self.len())))?;
            data.extend_from_slice(s.image.data());
            labels.push(s.label);
        }
        Ok((Tensor::new(&[idx.len(), shape[0], shape[1], shape[2]], data)?, labels))
    }
}

/// Writes `samples` under `root` with a manifest.
pub fn write_dataset(root: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let root = root.as_ref();
    fs::create_dir_all(root)?;
    let mut manifest = String::from("file,label\n");
    for s in samples {
        if s.file.contains([',', '"', '\n', '\r']) {
            return Err(LslaError::Config(format!("file name `{}` cannot be written to the manifest", s.file)));
        }
        write_tensor(root.join(&s.file), &s.image)?;
        manifest.push_str(&format!("{},{}\n", s.file, s.label));
    }
    fs::write(root.join(MANIFEST), manifest)?;
    Ok(())
}
