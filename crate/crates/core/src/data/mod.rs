//! Datasets: PNG ingestion, preprocessing, augmentation, synthetic data and
//! stratified splits.
//!
//! Images are rank-3 `(H, W, C)` tensors with values in `[-1, 1]`.

mod image;
mod split;
mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::tensor::{Tensor, TensorError};

pub use self::image::{
    augment, augment_with, conform, load_and_preprocess, resize_bilinear, AugmentParams, SHEAR_RANGE, ZOOM_RANGE,
};
pub use split::{split, SplitSpec};
pub use synth::{quadrant_of, synthesize, synthesize_quadrants, SYNTH_SIZE};

/// Class names of the three-class task, in label order.
pub const DEFAULT_CLASSES: [&str; 3] = ["covid", "pneumonia", "normal"];

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Decode { path: PathBuf, source: ::image::ImageError },
    #[error("{path}: unsupported pixel format {format} (expected 8-bit grayscale or RGB)")]
    Unsupported { path: PathBuf, format: String },
    #[error("manifest: {0}")]
    Csv(#[from] csv::Error),
    #[error("class `{0}` has no samples")]
    EmptyClass(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("split: {0}")]
    Split(String),
    #[error("target shape must be (H, W, C) with C in {{1, 3}}, got {0:?}")]
    Target(Vec<usize>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub path: PathBuf,
    pub label: usize,
}

/// Files of a `root/<class>/*.png` dataset in canonical order: by class id,
/// then by file name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
}

impl DatasetManifest {
    pub fn scan(root: &Path, classes: &[String]) -> Result<DatasetManifest, DataError> {
        let mut samples = Vec::new();
        for (label, class) in classes.iter().enumerate() {
            let dir = root.join(class);
            let mut files: Vec<PathBuf> = fs::read_dir(&dir)
                .map_err(io_err(&dir))?
                .map(|e| e.map(|e| e.path()).map_err(io_err(&dir)))
                .collect::<Result<Vec<_>, _>>()?
                .into_iter()
                .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
                .collect();
            files.sort();
            samples.extend(files.into_iter().map(|path| Sample { path, label }));
        }
        let m = DatasetManifest {
            root: root.to_path_buf(),
            classes: classes.to_vec(),
            samples,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        for s in &self.samples {
            if s.label >= self.classes.len() {
                return Err(DataError::Label {
                    label: s.label,
                    classes: self.classes.len(),
                });
            }
        }
        for (k, c) in self.classes.iter().enumerate() {
            if !self.samples.iter().any(|s| s.label == k) {
                return Err(DataError::EmptyClass(c.clone()));
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// `path,label` rows, paths relative to the root where possible.
    pub fn write_csv(&self, path: &Path) -> Result<(), DataError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["path", "label"])?;
        for s in &self.samples {
            let rel = s.path.strip_prefix(&self.root).unwrap_or(&s.path);
            w.write_record([rel.to_string_lossy().as_ref(), &s.label.to_string()])?;
        }
        w.flush().map_err(io_err(path))?;
        Ok(())
    }

    /// Reads a manifest written by [`DatasetManifest::write_csv`]. Relative
    /// paths are resolved against `root`.
    pub fn read_csv(path: &Path, root: &Path, classes: &[String]) -> Result<DatasetManifest, DataError> {
        let mut r = csv::Reader::from_path(path)?;
        let mut samples = Vec::new();
        for row in r.deserialize() {
            let s: Sample = row?;
            samples.push(Sample {
                path: root.join(s.path),
                label: s.label,
            });
        }
        let m = DatasetManifest {
            root: root.to_path_buf(),
            classes: classes.to_vec(),
            samples,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn load(&self, target: &[usize]) -> Result<Dataset, DataError> {
        let images = self
            .samples
            .iter()
            .map(|s| load_and_preprocess(&s.path, target))
            .collect::<Result<Vec<_>, _>>()?;
        Dataset::new(self.classes.clone(), images, self.labels())
    }
}

/// Preprocessed images held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(classes: Vec<String>, images: Vec<Tensor>, labels: Vec<usize>) -> Result<Dataset, DataError> {
        if images.len() != labels.len() {
            return Err(DataError::Split(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes.len()) {
            return Err(DataError::Label {
                label,
                classes: classes.len(),
            });
        }
        if let Some(first) = images.first() {
            if let Some(bad) = images.iter().find(|t| t.shape() != first.shape()) {
                return Err(TensorError::Mismatch(first.shape().clone(), bad.shape().clone()).into());
            }
        }
        Ok(Dataset {
            classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Stacks the given samples into an `(N, H, W, C)` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>), DataError> {
        let imgs: Vec<&Tensor> = indices.iter().map(|&i| &self.images[i]).collect();
        Ok((Tensor::stack(&imgs)?, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            classes: self.classes.clone(),
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Writes every image as an 8-bit PNG under `root/<class>/NNNNN.png` and
    /// returns the manifest.
    pub fn write_pngs(&self, root: &Path) -> Result<DatasetManifest, DataError> {
        let mut samples = Vec::with_capacity(self.len());
        for c in &self.classes {
            let dir = root.join(c);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        for (i, (img, &label)) in self.images.iter().zip(&self.labels).enumerate() {
            let path = root.join(&self.classes[label]).join(format!("{i:05}.png"));
            image::save_png(img, &path)?;
            samples.push(Sample { path, label });
        }
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            classes: self.classes.clone(),
            samples,
        })
    }
}

#[cfg(test)]
mod tests;
