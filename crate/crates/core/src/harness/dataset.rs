//! Sample directories: one `.npy` per sample, sorted by file name, plus a
//! `labels.npy` vector of class indices.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::npy::{load_array, save_array};
use crate::tensor::Tensor;

pub const LABELS_FILE: &str = "labels.npy";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Tensor>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(samples: Vec<Tensor>, labels: Vec<usize>) -> Result<Self> {
        if samples.len() != labels.len() {
            return Err(Error::shape("labels", samples.len(), labels.len()));
        }
        if let Some(first) = samples.first() {
            if let Some(bad) = samples.iter().find(|s| s.shape() != first.shape()) {
                return Err(Error::shape(
                    "sample",
                    format!("{:?}", first.shape()),
                    format!("{:?}", bad.shape()),
                ));
            }
        }
        Ok(Dataset { samples, labels })
    }

    pub fn samples(&self) -> &[Tensor] {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut names: Vec<_> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".npy") && n != LABELS_FILE)
            .collect();
        names.sort();
        let samples = names
            .iter()
            .map(|n| load_array(dir.join(n)))
            .collect::<Result<Vec<_>>>()?;
        let labels_path = dir.join(LABELS_FILE);
        if !labels_path.exists() {
            return Err(Error::invalid(format!(
                "{} not found",
                labels_path.display()
            )));
        }
        let labels = load_array(&labels_path)?
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::invalid(format!("label {v} is not a class index")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(samples, labels)
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let width = self.samples.len().to_string().len().max(5);
        for (i, s) in self.samples.iter().enumerate() {
            save_array(dir.join(format!("sample_{i:0width$}.npy")), s)?;
        }
        let labels = Tensor::new(
            vec![self.labels.len()],
            self.labels.iter().map(|&l| l as f64).collect(),
        )?;
        save_array(dir.join(LABELS_FILE), &labels)
    }
}
