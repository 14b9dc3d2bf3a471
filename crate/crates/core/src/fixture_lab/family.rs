//! A base network plus one fine-tune per synthetic task, built end to end
//! from a single seed.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_for};
use crate::sweep::TaskEvaluator;
use crate::task_vectors::{self, TaskVector};
use crate::tensor_store::{self, Checkpoint};

use super::data::{dataset_path, generate_task, mixture, Dataset, Split, SyntheticTaskSpec, TaskData};
use super::network::{evaluate, finetune, pretrain, Mlp, TrainConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BASE_TASK_ID: &str = "base";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec {
    pub seed: u64,
    pub num_tasks: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    /// Scale of each task's region center.
    pub region_scale: f64,
    /// Scale of the per-task class offsets around the center.
    pub class_scale: f64,
    pub noise_sigma: f64,
    /// Input features carrying each task's class signal (a task-specific
    /// random subset); `input_dim` means every feature.
    pub active_dims: usize,
    pub base_train_size: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    /// Training recipes; their seeds are hashed with a purpose string before
    /// use, so they can be small user-facing integers.
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
}

impl FamilySpec {
    /// The default desk-scale family: 8 tasks, 32 inputs, hidden [64, 64],
    /// 5 classes.
    pub fn default_with_seed(seed: u64) -> Self {
        FamilySpec {
            seed,
            num_tasks: 8,
            num_classes: 5,
            input_dim: 32,
            region_scale: 1.0,
            class_scale: 0.6,
            noise_sigma: 1.0,
            active_dims: 32,
            base_train_size: 2000,
            train_size: 500,
            val_size: 1000,
            test_size: 1000,
            pretrain: TrainConfig {
                hidden_dims: vec![64, 64],
                learning_rate: 0.05,
                epochs: 3,
                batch_size: 32,
                weight_decay: 1e-4,
                seed,
            },
            finetune: TrainConfig {
                hidden_dims: vec![64, 64],
                learning_rate: 0.05,
                epochs: 15,
                batch_size: 32,
                weight_decay: 1e-4,
                seed,
            },
        }
    }

    pub fn task_ids(&self) -> Vec<String> {
        (0..self.num_tasks).map(|i| format!("task{i}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 {
            return Err(Error::EmptyTaskList);
        }
        if self.pretrain.hidden_dims != self.finetune.hidden_dims {
            return Err(Error::InvalidConfig("pretrain and finetune must share hidden_dims".into()));
        }
        if self.active_dims == 0 || self.active_dims > self.input_dim {
            return Err(Error::InvalidConfig(format!(
                "active_dims must lie in 1..={} (got {})",
                self.input_dim, self.active_dims
            )));
        }
        if !(self.region_scale.is_finite() && self.class_scale.is_finite()) {
            return Err(Error::InvalidConfig("region_scale and class_scale must be finite".into()));
        }
        self.pretrain.validate()?;
        self.finetune.validate()
    }

    /// Each task places its classes at `center + offset_c`, with a center and
    /// offsets of its own; offsets are zero outside the task's active dims. Labels mean different regions in different tasks.
    pub fn task_specs(&self) -> Vec<SyntheticTaskSpec> {
        self.task_ids()
            .into_iter()
            .map(|task_id| {
                let mut rng = rng_for(self.seed, &format!("family/means/{task_id}"));
                let d = self.input_dim;
                let gauss = |rng: &mut rand_chacha::ChaCha8Rng, scale: f64| -> Vec<f32> {
                    (0..d).map(|_| (scale * rng.sample::<f64, _>(StandardNormal)) as f32).collect()
                };
                let center = gauss(&mut rng, self.region_scale);
                let mut active = vec![false; self.input_dim];
                for i in rand::seq::index::sample(&mut rng, self.input_dim, self.active_dims) {
                    active[i] = true;
                }
                let class_means = (0..self.num_classes)
                    .map(|_| {
                        let offset = gauss(&mut rng, self.class_scale);
                        (0..self.input_dim)
                            .map(|i| center[i] + if active[i] { offset[i] } else { 0.0 })
                            .collect()
                    })
                    .collect();
                SyntheticTaskSpec {
                    seed: derive_seed(self.seed, &format!("family/data/{task_id}")),
                    task_id,
                    num_classes: self.num_classes,
                    input_dim: self.input_dim,
                    class_means,
                    noise_sigma: self.noise_sigma,
                    train_size: self.train_size,
                    val_size: self.val_size,
                    test_size: self.test_size,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskAccuracy {
    pub base_val: f64,
    pub base_test: f64,
    pub finetuned_val: f64,
    pub finetuned_test: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: FamilySpec,
    pub num_params: usize,
    pub accuracies: BTreeMap<String, TaskAccuracy>,
}

#[derive(Debug, Clone)]
pub struct Family {
    pub spec: FamilySpec,
    pub base_data: Dataset,
    pub tasks: Vec<TaskData>,
    pub base: Checkpoint,
    pub finetuned: Vec<Checkpoint>,
    pub task_vectors: Vec<TaskVector>,
    pub accuracies: BTreeMap<String, TaskAccuracy>,
}

impl Family {
    /// Generates data, pretrains, fine-tunes every task (in parallel, each
    /// run single-threaded) and records base/fine-tuned accuracies.
    pub fn build(spec: &FamilySpec) -> Result<Self> {
        spec.validate()?;
        let specs = spec.task_specs();
        let tasks = specs.iter().map(generate_task).collect::<Result<Vec<_>>>()?;
        let base_data = mixture(&specs, spec.base_train_size, derive_seed(spec.seed, "family/mixture"), BASE_TASK_ID)?;
        let pre = TrainConfig {
            seed: derive_seed(spec.pretrain.seed, "family/pretrain"),
            ..spec.pretrain.clone()
        };
        let (base, _) = pretrain(&base_data, &pre)?;
        let finetuned = tasks
            .par_iter()
            .map(|t| {
                let cfg = TrainConfig {
                    seed: derive_seed(spec.finetune.seed, &format!("family/finetune/{}", t.spec.task_id)),
                    ..spec.finetune.clone()
                };
                finetune(&base, &t.train, &cfg).map(|(c, _)| c)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(spec.clone(), base_data, tasks, base, finetuned)
    }

    fn assemble(
        spec: FamilySpec,
        base_data: Dataset,
        tasks: Vec<TaskData>,
        base: Checkpoint,
        finetuned: Vec<Checkpoint>,
    ) -> Result<Self> {
        let task_vectors = tasks
            .iter()
            .zip(&finetuned)
            .map(|(t, ft)| task_vectors::diff(&base, ft, &t.spec.task_id))
            .collect::<Result<Vec<_>>>()?;
        let base_net = Mlp::from_checkpoint(&base)?;
        let accuracies = tasks
            .par_iter()
            .zip(&finetuned)
            .map(|(t, ft)| {
                let ft_net = Mlp::from_checkpoint(ft)?;
                Ok((
                    t.spec.task_id.clone(),
                    TaskAccuracy {
                        base_val: base_net.accuracy(&t.val)?,
                        base_test: base_net.accuracy(&t.test)?,
                        finetuned_val: ft_net.accuracy(&t.val)?,
                        finetuned_test: ft_net.accuracy(&t.test)?,
                    },
                ))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(Family { spec, base_data, tasks, base, finetuned, task_vectors, accuracies })
    }

    pub fn task_ids(&self) -> Vec<&str> {
        self.tasks.iter().map(|t| t.spec.task_id.as_str()).collect()
    }

    pub fn task(&self, task_id: &str) -> Option<&TaskData> {
        self.tasks.iter().find(|t| t.spec.task_id == task_id)
    }

    /// Tasks whose fine-tune fails to match the base on its own test split.
    pub fn sanity_failures(&self) -> Vec<&str> {
        self.accuracies
            .iter()
            .filter(|(_, a)| a.finetuned_test < a.base_test)
            .map(|(k, _)| k.as_str())
            .collect()
    }

    pub fn evaluator(&self, split: Split) -> FixtureEvaluator<'_> {
        FixtureEvaluator { family: self, split }
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            spec: self.spec.clone(),
            num_params: self.base.num_params(),
            accuracies: self.accuracies.clone(),
        }
    }

    /// Writes `base.mbc`, `finetuned/`, `vectors/`, `data/` and the manifest.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for sub in ["finetuned", "vectors", "data"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        tensor_store::write_checkpoint(&self.base, dir.join("base.mbc"))?;
        let data = dir.join("data");
        self.base_data.save(dataset_path(&data, BASE_TASK_ID, Split::Train))?;
        for ((t, ft), tv) in self.tasks.iter().zip(&self.finetuned).zip(&self.task_vectors) {
            let id = &t.spec.task_id;
            tensor_store::write_checkpoint(ft, dir.join("finetuned").join(format!("{id}.mbc")))?;
            tv.save(dir.join("vectors").join(format!("{id}.mbc")))?;
            for split in [Split::Train, Split::Val, Split::Test] {
                t.split(split).save(dataset_path(&data, id, split))?;
            }
        }
        let json = serde_json::to_string_pretty(&self.manifest()).map_err(|e| Error::Report(e.to_string()))?;
        tensor_store::write_bytes_atomic(&dir.join(MANIFEST_FILE), json.as_bytes())
    }

    /// Reloads a family written by [`Family::save`] without retraining.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mpath = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Metadata(format!("{}: {e}", mpath.display())))?;
        let spec = manifest.spec;
        let data = dir.join("data");
        let base = tensor_store::read_checkpoint(dir.join("base.mbc"))?;
        let base_data = Dataset::load(dataset_path(&data, BASE_TASK_ID, Split::Train))?;
        let mut tasks = Vec::new();
        let mut finetuned = Vec::new();
        for s in spec.task_specs() {
            let id = s.task_id.clone();
            tasks.push(TaskData {
                train: Dataset::load(dataset_path(&data, &id, Split::Train))?,
                val: Dataset::load(dataset_path(&data, &id, Split::Val))?,
                test: Dataset::load(dataset_path(&data, &id, Split::Test))?,
                spec: s,
            });
            finetuned.push(tensor_store::read_checkpoint(dir.join("finetuned").join(format!("{id}.mbc")))?);
        }
        Self::assemble(spec, base_data, tasks, base, finetuned)
    }
}

/// Scores merged models on one split of a family's tasks, normalizing by
/// each task's fine-tuned accuracy on the same split.
#[derive(Debug, Clone, Copy)]
pub struct FixtureEvaluator<'a> {
    family: &'a Family,
    split: Split,
}

impl FixtureEvaluator<'_> {
    pub fn split(&self) -> Split {
        self.split
    }
}

impl TaskEvaluator for FixtureEvaluator<'_> {
    fn accuracy(&self, model: &Checkpoint, task_id: &str) -> Result<f64> {
        let t = self
            .family
            .task(task_id)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown fixture task `{task_id}`")))?;
        evaluate(model, t.split(self.split))
    }

    fn reference_accuracy(&self, task_id: &str) -> Result<f64> {
        let a = self
            .family
            .accuracies
            .get(task_id)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown fixture task `{task_id}`")))?;
        Ok(match self.split {
            Split::Val => a.finetuned_val,
            Split::Test => a.finetuned_test,
            Split::Train => {
                let t = self.family.task(task_id).expect("accuracies and tasks share ids");
                let i = self.family.tasks.iter().position(|x| std::ptr::eq(x, t)).unwrap();
                evaluate(&self.family.finetuned[i], &t.train)?
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> FamilySpec {
        let mut s = FamilySpec::default_with_seed(seed);
        s.num_tasks = 3;
        s.input_dim = 6;
        s.active_dims = 6;
        s.base_train_size = 150;
        s.train_size = 60;
        s.val_size = 40;
        s.test_size = 40;
        s.pretrain.hidden_dims = vec![8];
        s.finetune.hidden_dims = vec![8];
        s.pretrain.epochs = 2;
        s.finetune.epochs = 3;
        s
    }

    #[test]
    fn default_size_is_about_six_thousand_params() {
        let s = FamilySpec::default_with_seed(0);
        let net = Mlp::init(s.input_dim, &s.pretrain.hidden_dims, s.num_classes, 0);
        assert_eq!(net.num_params(), 32 * 64 + 64 + 64 * 64 + 64 + 64 * 5 + 5);
    }

    #[test]
    fn build_is_deterministic_and_round_trips() {
        let a = Family::build(&tiny(11)).unwrap();
        let b = Family::build(&tiny(11)).unwrap();
        assert!(a.base.bitwise_eq(&b.base));
        for (x, y) in a.finetuned.iter().zip(&b.finetuned) {
            assert!(x.bitwise_eq(y));
        }
        assert_eq!(a.accuracies, b.accuracies);
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        let back = Family::load(dir.path()).unwrap();
        assert!(back.base.bitwise_eq(&a.base));
        assert_eq!(back.accuracies, a.accuracies);
        assert_eq!(back.tasks, a.tasks);
    }

    #[test]
    fn evaluator_reports_reference_accuracy() {
        let f = Family::build(&tiny(12)).unwrap();
        let ev = f.evaluator(Split::Test);
        for (i, id) in f.task_ids().into_iter().enumerate() {
            assert_eq!(ev.accuracy(&f.finetuned[i], id).unwrap(), ev.reference_accuracy(id).unwrap());
        }
        assert!(ev.accuracy(&f.base, "nope").is_err());
    }

    #[test]
    fn finetunes_differ_per_task() {
        let f = Family::build(&tiny(13)).unwrap();
        assert_ne!(f.task_vectors[0].deltas().tensors(), f.task_vectors[1].deltas().tensors());
        assert!(f.task_vectors[0].deltas().tensors().iter().any(|t| t.data().iter().any(|&v| v != 0.0)));
    }
}
