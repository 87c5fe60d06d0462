//! Trial sets, their on-disk format, task label mapping and a synthetic
//! generator.
//!
//! Trial file layout (little-endian): magic `EEGT`, version `u32`, extents
//! `N`, `channels`, `T` as `u64`, then `N·channels·T` `f32` samples. Labels
//! live next to it in `<path>.labels.json`.

mod synth;
mod task;

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use synth::{synth_generate, SynthConfig};
pub use task::{apply_task, Category, Task, TaskData};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EEGT";
pub const VERSION: u32 = 1;
pub const CATEGORIES: usize = 6;
pub const EXEMPLARS_PER_CATEGORY: usize = 12;
pub const EXEMPLARS: usize = CATEGORIES * EXEMPLARS_PER_CATEGORY;

/// Trials `N × channels × T` with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialSet {
    pub trials: Tensor<f32>,
    pub category: Vec<usize>,
    pub exemplar: Vec<usize>,
    pub subject: Vec<usize>,
    pub sample_rate: f64,
}

#[derive(Serialize, Deserialize)]
struct LabelFile {
    category: Vec<usize>,
    exemplar: Vec<usize>,
    subject: Vec<usize>,
    sample_rate: f64,
}

/// Class balance and shapes of a trial set.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub trials: usize,
    pub channels: usize,
    pub frames: usize,
    pub sample_rate: f64,
    pub subjects: BTreeMap<usize, usize>,
    pub category_counts: Vec<usize>,
    pub exemplar_counts: Vec<usize>,
}

pub fn labels_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".labels.json");
    PathBuf::from(s)
}

impl TrialSet {
    pub fn new(
        trials: Tensor<f32>,
        category: Vec<usize>,
        exemplar: Vec<usize>,
        subject: Vec<usize>,
        sample_rate: f64,
    ) -> Result<Self> {
        let set = Self {
            trials,
            category,
            exemplar,
            subject,
            sample_rate,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials.rank() != 3 {
            return Err(Error::InvalidArgument(format!(
                "trials must be N×channels×T, got {:?}",
                self.trials.shape()
            )));
        }
        let n = self.len();
        if self.category.len() != n || self.exemplar.len() != n || self.subject.len() != n {
            return Err(Error::InvalidArgument(format!(
                "label counts {}/{}/{} do not match {n} trials",
                self.category.len(),
                self.exemplar.len(),
                self.subject.len()
            )));
        }
        for (i, (&c, &e)) in self.category.iter().zip(&self.exemplar).enumerate() {
            if e >= EXEMPLARS || c != e / EXEMPLARS_PER_CATEGORY {
                return Err(Error::InvalidArgument(format!(
                    "trial {i}: exemplar {e} inconsistent with category {c}"
                )));
            }
        }
        if !(self.sample_rate.is_finite() && self.sample_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "bad sample rate {}",
                self.sample_rate
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.trials.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.trials.shape()[1]
    }

    pub fn frames(&self) -> usize {
        self.trials.shape()[2]
    }

    /// Samples of trial `i`, `channels × T` row-major.
    pub fn trial(&self, i: usize) -> &[f32] {
        let len = self.channels() * self.frames();
        &self.trials.data()[i * len..(i + 1) * len]
    }

    /// Trials at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Empty("trial subset".into()));
        }
        let len = self.channels() * self.frames();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(self.trial(i));
        }
        Ok(Self {
            trials: Tensor::new(&[indices.len(), self.channels(), self.frames()], data)?,
            category: indices.iter().map(|&i| self.category[i]).collect(),
            exemplar: indices.iter().map(|&i| self.exemplar[i]).collect(),
            subject: indices.iter().map(|&i| self.subject[i]).collect(),
            sample_rate: self.sample_rate,
        })
    }

    /// Distinct subject ids in ascending order.
    pub fn subjects(&self) -> Vec<usize> {
        let mut s = self.subject.clone();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn summary(&self) -> DatasetSummary {
        let mut subjects = BTreeMap::new();
        for &s in &self.subject {
            *subjects.entry(s).or_insert(0) += 1;
        }
        let mut category_counts = vec![0; CATEGORIES];
        let mut exemplar_counts = vec![0; EXEMPLARS];
        for (&c, &e) in self.category.iter().zip(&self.exemplar) {
            category_counts[c] += 1;
            exemplar_counts[e] += 1;
        }
        DatasetSummary {
            trials: self.len(),
            channels: self.channels(),
            frames: self.frames(),
            sample_rate: self.sample_rate,
            subjects,
            category_counts,
            exemplar_counts,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(32 + self.trials.numel() * 4);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        for &e in self.trials.shape() {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in self.trials.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn labels_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&LabelFile {
            category: self.category.clone(),
            exemplar: self.exemplar.clone(),
            subject: self.subject.clone(),
            sample_rate: self.sample_rate,
        })?)
    }

    /// Writes the trial file and its label sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))?;
        let lp = labels_path(path);
        std::fs::write(&lp, self.labels_json()?).map_err(|e| Error::io(&lp, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let trials = decode_tensor(&bytes, path)?;
        let lp = labels_path(path);
        let text = std::fs::read_to_string(&lp).map_err(|e| Error::io(&lp, e))?;
        let labels: LabelFile =
            serde_json::from_str(&text).map_err(|e| Error::format(&lp, e.to_string()))?;
        Self::new(
            trials,
            labels.category,
            labels.exemplar,
            labels.subject,
            labels.sample_rate,
        )
        .map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Parses the binary part of an `EEGT` file into an `N×channels×T` tensor.
pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let header = 4 + 4 + 3 * 8;
    if bytes.len() < header {
        return Err(Error::format(path, "truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(path, "bad magic, expected EEGT"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(
            path,
            format!("unsupported trial file version {version}"),
        ));
    }
    let dims: Vec<usize> = (0..3)
        .map(|i| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap()) as usize)
        .collect();
    let numel = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(path, "extent product overflows"))?;
    let payload = &bytes[header..];
    if payload.len() != numel {
        return Err(Error::format(
            path,
            format!("payload has {} bytes, expected {numel}", payload.len()),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(&dims, data).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes an arbitrary `N×A×B` tensor in the trial file layout (used for
/// mesh dumps).
pub fn save_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    if t.rank() != 3 {
        return Err(Error::InvalidArgument(format!(
            "expected rank 3, got {:?}",
            t.shape()
        )));
    }
    let mut buf = Vec::with_capacity(32 + t.numel() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}
