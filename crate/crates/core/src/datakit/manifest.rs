//! Dataset manifests: one JSON document per split pointing at tensor files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synthetic::{SyntheticData, SyntheticMode, SyntheticSpec};
use super::tensor_file::{read_tensor_file, write_tensor_file};
use super::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Vector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Ood,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Ood => "ood",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "ood" => Ok(Split::Ood),
            _ => Err(Error::Config(format!("unknown split `{s}` (expected train, test or ood)"))),
        }
    }
}

/// Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub modality: Modality,
    pub shape: Vec<usize>,
    pub class_names: Vec<String>,
    pub samples_path: String,
    pub labels_path: Option<String>,
    pub split: Split,
}

impl DatasetManifest {
    /// Loads the referenced tensors and checks them against the manifest.
    pub fn load(&self, dir: &Path) -> Result<(Tensor, Option<Vec<usize>>)> {
        let samples_file = dir.join(&self.samples_path);
        let samples = read_tensor_file(&samples_file)?;
        let bad = |msg: String| Error::Config(format!("{}: {msg}", samples_file.display()));
        if samples.shape().get(1..) != Some(&self.shape[..]) {
            return Err(bad(format!(
                "sample shape {:?} does not match manifest shape {:?}",
                samples.shape().get(1..).unwrap_or(&[]),
                self.shape
            )));
        }
        if samples.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(bad("sample values outside [0, 1]".into()));
        }
        let labels = match &self.labels_path {
            None if self.split == Split::Ood => None,
            None => return Err(bad(format!("{} split needs labels", self.split.as_str()))),
            Some(p) => {
                let t = read_tensor_file(dir.join(p))?;
                if t.shape() != [samples.batch()] {
                    return Err(bad(format!(
                        "labels shape {:?} for {} samples",
                        t.shape(),
                        samples.batch()
                    )));
                }
                let n_c = self.class_names.len();
                let labels = t
                    .data()
                    .iter()
                    .map(|&v| (v.fract() == 0.0 && v >= 0.0 && (v as usize) < n_c).then_some(v as usize))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| bad(format!("labels must be integers in [0, {n_c})")))?;
                Some(labels)
            }
        };
        Ok((samples, labels))
    }
}

/// Reads a manifest file and its tensors.
pub fn load_split(manifest_path: impl AsRef<Path>) -> Result<(DatasetManifest, Tensor, Option<Vec<usize>>)> {
    let path = manifest_path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let (samples, labels) = manifest.load(dir)?;
    Ok((manifest, samples, labels))
}

fn labels_tensor(labels: &[usize]) -> Tensor {
    Tensor::new(vec![labels.len()], labels.iter().map(|&l| l as f32).collect()).unwrap()
}

/// Writes samples, labels and a manifest for each split; returns manifest paths
/// in train, test, ood order.
pub fn write_dataset(dir: &Path, spec: &SyntheticSpec, data: &SyntheticData) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (modality, name) = match spec.mode {
        SyntheticMode::Shapes => (Modality::Image, "synthetic-shapes"),
        SyntheticMode::Blobs => (Modality::Vector, "synthetic-blobs"),
    };
    let splits = [
        (Split::Train, &data.train.inputs, Some(&data.train.labels)),
        (Split::Test, &data.test.inputs, Some(&data.test.labels)),
        (Split::Ood, &data.ood, None),
    ];
    let mut out = Vec::new();
    for (split, samples, labels) in splits {
        let tag = split.as_str();
        let samples_path = format!("{tag}_samples.oodt");
        write_tensor_file(samples, dir.join(&samples_path))?;
        let labels_path = match labels {
            Some(l) => {
                let p = format!("{tag}_labels.oodt");
                write_tensor_file(&labels_tensor(l), dir.join(&p))?;
                Some(p)
            }
            None => None,
        };
        let manifest = DatasetManifest {
            name: name.to_string(),
            modality,
            shape: spec.sample_shape(),
            class_names: spec.class_names(),
            samples_path,
            labels_path,
            split,
        };
        let path = dir.join(format!("{tag}.json"));
        write_atomic(&path, (serde_json::to_string_pretty(&manifest).unwrap() + "\n").as_bytes())?;
        out.push(path);
    }
    Ok(out)
}
