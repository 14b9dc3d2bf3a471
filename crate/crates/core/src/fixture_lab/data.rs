//! Gaussian-blob classification tasks sharing one label space.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::task_vectors::KIND_KEY;
use crate::tensor_store::{self, Checkpoint, TensorRecord};

pub const KIND_DATASET: &str = "dataset";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub task_id: String,
    pub num_classes: usize,
    pub input_dim: usize,
    /// `num_classes` rows of `input_dim` values.
    pub class_means: Vec<Vec<f32>>,
    pub noise_sigma: f64,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |why: String| Err(Error::InvalidConfig(format!("task `{}`: {why}", self.task_id)));
        if self.task_id.is_empty() {
            return Err(Error::InvalidConfig("task id must be non-empty".into()));
        }
        if self.num_classes < 2 {
            return bad(format!("needs at least 2 classes, got {}", self.num_classes));
        }
        if self.input_dim == 0 {
            return bad("input_dim must be positive".into());
        }
        if self.class_means.len() != self.num_classes || self.class_means.iter().any(|m| m.len() != self.input_dim) {
            return bad(format!("class_means must be {}x{}", self.num_classes, self.input_dim));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma must be finite and non-negative, got {}", self.noise_sigma));
        }
        if self.train_size == 0 || self.val_size == 0 || self.test_size == 0 {
            return bad("split sizes must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task_id: String,
    pub split: Split,
    pub input_dim: usize,
    pub num_classes: usize,
    /// Row-major `len x input_dim`.
    pub features: Vec<f32>,
    pub labels: Vec<u32>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Features as an `[n, d]` tensor, labels as float32 class codes.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let n = self.len();
        let tensors = vec![
            TensorRecord::new("features", vec![n, self.input_dim], self.features.clone())?,
            TensorRecord::new("labels", vec![n], self.labels.iter().map(|&l| l as f32).collect())?,
        ];
        let mut meta = BTreeMap::new();
        meta.insert(KIND_KEY.to_string(), KIND_DATASET.to_string());
        meta.insert("task_id".to_string(), self.task_id.clone());
        meta.insert("split".to_string(), self.split.to_string());
        meta.insert("num_classes".to_string(), self.num_classes.to_string());
        Checkpoint::new(tensors, meta)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = ckpt.metadata();
        if meta.get(KIND_KEY).map(String::as_str) != Some(KIND_DATASET) {
            return Err(Error::Metadata(format!("expected {KIND_KEY}={KIND_DATASET}")));
        }
        let get = |k: &str| meta.get(k).ok_or_else(|| Error::Metadata(format!("dataset lacks `{k}`")));
        let num_classes: usize = get("num_classes")?
            .parse()
            .map_err(|_| Error::Metadata("bad num_classes".into()))?;
        let split: Split = get("split")?.parse()?;
        let features = ckpt.get("features").ok_or_else(|| Error::Metadata("dataset lacks `features`".into()))?;
        let labels = ckpt.get("labels").ok_or_else(|| Error::Metadata("dataset lacks `labels`".into()))?;
        let [n, d] = features.shape() else {
            return Err(Error::Metadata("features must be rank 2".into()));
        };
        if labels.shape() != [*n] {
            return Err(Error::Metadata("labels must be a vector matching the feature rows".into()));
        }
        let labels = labels
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && (v as usize) < num_classes {
                    Ok(v as u32)
                } else {
                    Err(Error::Metadata(format!("label {v} is not a class index below {num_classes}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            task_id: get("task_id")?.clone(),
            split,
            input_dim: *d,
            num_classes,
            features: features.data().to_vec(),
            labels,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        tensor_store::write_checkpoint(&self.to_checkpoint()?, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&tensor_store::read_checkpoint(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub spec: SyntheticTaskSpec,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl TaskData {
    pub fn split(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Draws one split: labels cycle through the classes (so class counts differ
/// by at most one), then rows are shuffled.
fn sample_split(spec: &SyntheticTaskSpec, split: Split, size: usize) -> Dataset {
    let mut rng = rng_for(spec.seed, &format!("data/{}/{}", spec.task_id, split));
    let mut labels: Vec<u32> = (0..size).map(|i| (i % spec.num_classes) as u32).collect();
    labels.shuffle(&mut rng);
    let mut features = Vec::with_capacity(size * spec.input_dim);
    for &l in &labels {
        for &m in &spec.class_means[l as usize] {
            let z: f64 = rng.sample(StandardNormal);
            features.push((m as f64 + spec.noise_sigma * z) as f32);
        }
    }
    Dataset {
        task_id: spec.task_id.clone(),
        split,
        input_dim: spec.input_dim,
        num_classes: spec.num_classes,
        features,
        labels,
    }
}

pub fn generate_task(spec: &SyntheticTaskSpec) -> Result<TaskData> {
    spec.validate()?;
    Ok(TaskData {
        spec: spec.clone(),
        train: sample_split(spec, Split::Train, spec.train_size),
        val: sample_split(spec, Split::Val, spec.val_size),
        test: sample_split(spec, Split::Test, spec.test_size),
    })
}

/// Training set for the shared base model: rows drawn from every task's
/// distribution in turn, so the base sees the mixture of all tasks.
pub fn mixture(specs: &[SyntheticTaskSpec], size: usize, seed: u64, task_id: &str) -> Result<Dataset> {
    let first = specs.first().ok_or(Error::EmptyTaskList)?;
    for s in specs {
        s.validate()?;
        if s.input_dim != first.input_dim || s.num_classes != first.num_classes {
            return Err(Error::InvalidConfig(format!(
                "task `{}` does not share input_dim/num_classes with `{}`",
                s.task_id, first.task_id
            )));
        }
    }
    if size == 0 {
        return Err(Error::InvalidConfig("mixture size must be positive".into()));
    }
    // per-task quotas differ by at most one
    let parts: Vec<Dataset> = specs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let quota = size / specs.len() + usize::from(i < size % specs.len());
            let tagged = SyntheticTaskSpec {
                seed: crate::seed::derive_seed(seed, &format!("mixture/{}", s.task_id)),
                ..s.clone()
            };
            sample_split(&tagged, Split::Train, quota)
        })
        .collect();
    let mut rows: Vec<(usize, usize)> = parts.iter().enumerate().flat_map(|(p, d)| (0..d.len()).map(move |r| (p, r))).collect();
    rows.shuffle(&mut rng_for(seed, "mixture/order"));
    let mut features = Vec::with_capacity(size * first.input_dim);
    let mut labels = Vec::with_capacity(size);
    for (p, r) in rows {
        features.extend_from_slice(parts[p].row(r));
        labels.push(parts[p].labels[r]);
    }
    Ok(Dataset {
        task_id: task_id.to_string(),
        split: Split::Train,
        input_dim: first.input_dim,
        num_classes: first.num_classes,
        features,
        labels,
    })
}

/// Generates every task and writes `<task>.<split>.mbc` files into `dir`.
pub fn generate_tasks(specs: &[SyntheticTaskSpec], dir: impl AsRef<Path>) -> Result<Vec<TaskData>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tasks = specs.iter().map(generate_task).collect::<Result<Vec<_>>>()?;
    for t in &tasks {
        for split in [Split::Train, Split::Val, Split::Test] {
            t.split(split).save(dataset_path(dir, &t.spec.task_id, split))?;
        }
    }
    Ok(tasks)
}

pub fn dataset_path(dir: &Path, task_id: &str, split: Split) -> PathBuf {
    dir.join(format!("{task_id}.{split}.mbc"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(sigma: f64) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            task_id: "blobs".into(),
            num_classes: 3,
            input_dim: 2,
            class_means: vec![vec![10.0, 0.0], vec![0.0, 10.0], vec![-10.0, -10.0]],
            noise_sigma: sigma,
            train_size: 31,
            val_size: 20,
            test_size: 20,
            seed: 42,
        }
    }

    #[test]
    fn balanced_classes() {
        let t = generate_task(&spec(1.0)).unwrap();
        let counts = t.train.class_counts();
        assert_eq!(counts.iter().sum::<usize>(), 31);
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        assert_eq!(t.val.class_counts(), vec![7, 7, 6]);
    }

    #[test]
    fn splits_use_distinct_streams() {
        let t = generate_task(&spec(1.0)).unwrap();
        assert_ne!(t.val.features, t.test.features);
    }

    #[test]
    fn same_seed_same_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        generate_tasks(&[spec(0.5)], &a).unwrap();
        generate_tasks(&[spec(0.5)], &b).unwrap();
        for split in [Split::Train, Split::Val, Split::Test] {
            let x = std::fs::read(dataset_path(&a, "blobs", split)).unwrap();
            let y = std::fs::read(dataset_path(&b, "blobs", split)).unwrap();
            assert_eq!(x, y);
        }
        let back = Dataset::load(dataset_path(&a, "blobs", Split::Val)).unwrap();
        assert_eq!(back, generate_task(&spec(0.5)).unwrap().val);
    }

    #[test]
    fn degenerate_specs_rejected() {
        let mut s = spec(1.0);
        s.train_size = 0;
        assert!(generate_task(&s).is_err());
        let mut s = spec(1.0);
        s.num_classes = 1;
        assert!(generate_task(&s).is_err());
        let mut s = spec(1.0);
        s.class_means.pop();
        assert!(generate_task(&s).is_err());
    }

    #[test]
    fn mixture_draws_from_every_task() {
        let mut other = spec(0.0);
        other.task_id = "far".into();
        other.class_means = vec![vec![100.0, 100.0]; 3];
        let m = mixture(&[spec(0.0), other], 10, 1, "base").unwrap();
        assert_eq!(m.len(), 10);
        let far = (0..10).filter(|&i| m.row(i)[0] == 100.0).count();
        assert_eq!(far, 5);
    }
}
