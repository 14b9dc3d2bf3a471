//! Hyperparameter search and the incremental-merging protocols built on it.

use std::cmp::Ordering;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{finish_csv, EvalReport};
use crate::error::{Error, Result};
use crate::masking::{MaskScope, MaskSpec, MaskVariant};
use crate::merging::{MergeConfig, MergeMethod, MergeRegistry};
use crate::task_vectors::TaskVector;
use crate::tensor_store::Checkpoint;

/// Largest task family accepted by [`Harness::subset_scan`].
pub const MAX_SUBSET_TASKS: usize = 12;

/// Scores a merged model on individual tasks.
pub trait TaskEvaluator: Sync {
    /// Accuracy of `model` on `task_id`, in [0, 1].
    fn accuracy(&self, model: &Checkpoint, task_id: &str) -> Result<f64>;

    /// Accuracy of the task's own fine-tuned model, the normalizer.
    fn reference_accuracy(&self, task_id: &str) -> Result<f64>;
}

/// Evaluates `model` on `tasks` in the given order.
pub fn evaluate_report<E: TaskEvaluator + ?Sized>(
    evaluator: &E,
    model: &Checkpoint,
    tasks: &[&str],
) -> Result<EvalReport> {
    let scores = tasks
        .iter()
        .map(|&t| Ok((t, evaluator.accuracy(model, t)?, evaluator.reference_accuracy(t)?)))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::new(scores)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub method: MergeMethod,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub gammas: Vec<f64>,
    /// TIES trim levels; read only when `method` is ties.
    #[serde(default = "default_keep")]
    pub keep_fractions: Vec<f64>,
    /// Mask variant for breadcrumbs grids (ablations use one-sided variants).
    #[serde(default = "default_variant")]
    pub variant: MaskVariant,
    #[serde(default = "default_scope")]
    pub scope: MaskScope,
    #[serde(default)]
    pub seed: u64,
}

fn default_keep() -> Vec<f64> {
    vec![0.1, 0.2, 0.3, 0.5, 1.0]
}

fn default_variant() -> MaskVariant {
    MaskVariant::TwoTailed
}

fn default_scope() -> MaskScope {
    MaskScope::PerLayer
}

impl GridSpec {
    /// Default search neighborhood: alpha 0.1..=1.0, beta and gamma around
    /// the usual operating points.
    pub fn default_for(method: MergeMethod) -> Self {
        GridSpec {
            method,
            alphas: (1..=10).map(|i| i as f64 / 10.0).collect(),
            betas: vec![0.0, 0.5, 0.8, 0.85, 0.9, 0.95],
            gammas: vec![0.99, 0.992, 0.994, 0.996, 0.998, 1.0],
            keep_fractions: default_keep(),
            variant: match method {
                MergeMethod::RandomSparse => MaskVariant::Random,
                _ => MaskVariant::TwoTailed,
            },
            scope: MaskScope::PerLayer,
            seed: 0,
        }
    }

    pub fn with_variant(mut self, variant: MaskVariant) -> Self {
        self.variant = variant;
        self
    }

    /// Deduplicated, lexicographically ordered configurations. Axes that a
    /// method or variant ignores collapse to a single neutral value, and
    /// cells with `beta > gamma` are skipped.
    pub fn expand(&self) -> Result<Vec<MergeConfig>> {
        let neutral_beta = vec![0.0];
        let neutral_gamma = vec![1.0];
        let neutral_keep = vec![1.0];
        let masked = matches!(self.method, MergeMethod::Breadcrumbs | MergeMethod::RandomSparse);
        let uses_beta = masked && matches!(self.variant, MaskVariant::TwoTailed | MaskVariant::BottomOnly | MaskVariant::Random);
        let uses_gamma = masked && matches!(self.variant, MaskVariant::TwoTailed | MaskVariant::TopOnly | MaskVariant::Random);

        let alphas = sorted_unique(&self.alphas, "alphas")?;
        let betas = if uses_beta { sorted_unique(&self.betas, "betas")? } else { neutral_beta };
        let gammas = if uses_gamma { sorted_unique(&self.gammas, "gammas")? } else { neutral_gamma };
        let keeps = if self.method == MergeMethod::Ties {
            sorted_unique(&self.keep_fractions, "keep_fractions")?
        } else {
            neutral_keep
        };
        if self.method == MergeMethod::RandomSparse && self.variant != MaskVariant::Random {
            return Err(Error::InvalidConfig("random_sparse grids require variant `random`".into()));
        }

        let mut out = Vec::new();
        for &alpha in &alphas {
            for &beta in &betas {
                for &gamma in &gammas {
                    if beta > gamma {
                        continue;
                    }
                    for &keep in &keeps {
                        let cfg = MergeConfig {
                            method: self.method,
                            alpha,
                            mask_spec: MaskSpec {
                                beta,
                                gamma,
                                scope: self.scope,
                                variant: if masked { self.variant } else { MaskVariant::None },
                                exempt: Vec::new(),
                            },
                            ties_keep_fraction: keep,
                            seed: self.seed,
                            allow_base_mismatch: false,
                        };
                        out.push(cfg);
                    }
                }
            }
        }
        if out.is_empty() {
            return Err(Error::InvalidConfig("grid has no valid cell (every beta exceeds every gamma)".into()));
        }
        Ok(out)
    }
}

fn sorted_unique(values: &[f64], axis: &str) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::InvalidConfig(format!("grid axis `{axis}` is empty")));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig(format!("grid axis `{axis}` holds non-finite {v}")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub config: MergeConfig,
    pub report: EvalReport,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub entries: Vec<SweepEntry>,
    /// Index of the highest average normalized accuracy; the first such
    /// entry in grid order, i.e. the lexicographically smallest config.
    pub best: usize,
}

impl SweepResult {
    fn from_entries(entries: Vec<SweepEntry>) -> Self {
        let best = best_index(entries.iter().map(|e| e.report.average_normalized_accuracy));
        SweepResult { entries, best }
    }

    pub fn best_entry(&self) -> &SweepEntry {
        &self.entries[self.best]
    }

    pub fn best_score(&self) -> f64 {
        self.best_entry().report.average_normalized_accuracy
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Report(e.to_string()))
    }

    /// One row per grid cell with per-task normalized scores.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Report(e.to_string());
        let tasks = self
            .entries
            .first()
            .map(|e| e.report.observed_tasks.clone())
            .unwrap_or_default();
        let mut header: Vec<String> = ["method", "alpha", "beta", "gamma", "variant", "ties_keep_fraction", "seed", "average_normalized_accuracy", "average_accuracy", "wall_time_secs"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend(tasks.iter().map(|t| format!("norm:{t}")));
        w.write_record(&header).map_err(err)?;
        for e in &self.entries {
            let c = &e.config;
            let mut rec = vec![
                c.method.to_string(),
                c.alpha.to_string(),
                c.mask_spec.beta.to_string(),
                c.mask_spec.gamma.to_string(),
                c.mask_spec.variant.to_string(),
                c.ties_keep_fraction.to_string(),
                c.seed.to_string(),
                e.report.average_normalized_accuracy.to_string(),
                e.report.average_accuracy.to_string(),
                format!("{:.6}", e.wall_time_secs),
            ];
            rec.extend(tasks.iter().map(|t| {
                e.report
                    .per_task
                    .get(t)
                    .map_or_else(String::new, |s| s.normalized_accuracy.to_string())
            }));
            w.write_record(&rec).map_err(err)?;
        }
        finish_csv(w)
    }
}

/// First index of the maximum; NaN never wins.
fn best_index(scores: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, s) in scores.enumerate() {
        if s.partial_cmp(&best_score) == Some(Ordering::Greater) {
            best = i;
            best_score = s;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalScope {
    /// Every task in the family, merged or not.
    AllTasks,
    /// Only the tasks whose vectors went into the merge.
    ObservedOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetTuning {
    /// Best grid cell chosen independently for every subset.
    PerSubset,
    /// One grid cell per subset size, maximizing the size's mean score.
    PerSize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetEntry {
    pub tasks: Vec<String>,
    pub size: usize,
    pub config: MergeConfig,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeMean {
    pub size: usize,
    pub subsets: usize,
    pub mean_normalized_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetScan {
    pub scope: EvalScope,
    /// Ordered by size, then by the subset's bitmask over the input order.
    pub entries: Vec<SubsetEntry>,
    pub size_means: Vec<SizeMean>,
}

impl SubsetScan {
    fn from_entries(scope: EvalScope, entries: Vec<SubsetEntry>) -> Self {
        let size_means = size_means(entries.iter().map(|e| (e.size, e.report.average_normalized_accuracy)));
        SubsetScan { scope, entries, size_means }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Report(e.to_string()))
    }

    /// Per-subset dump: size, `|`-joined task ids, score, config.
    pub fn entries_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Report(e.to_string());
        w.write_record(["size", "tasks", "average_normalized_accuracy", "average_accuracy", "method", "alpha", "beta", "gamma"])
            .map_err(err)?;
        for e in &self.entries {
            w.write_record([
                e.size.to_string(),
                e.tasks.join("|"),
                e.report.average_normalized_accuracy.to_string(),
                e.report.average_accuracy.to_string(),
                e.config.method.to_string(),
                e.config.alpha.to_string(),
                e.config.mask_spec.beta.to_string(),
                e.config.mask_spec.gamma.to_string(),
            ])
            .map_err(err)?;
        }
        finish_csv(w)
    }

    pub fn size_means_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Report(e.to_string());
        w.write_record(["size", "subsets", "mean_normalized_accuracy"]).map_err(err)?;
        for m in &self.size_means {
            w.write_record([m.size.to_string(), m.subsets.to_string(), m.mean_normalized_accuracy.to_string()])
                .map_err(err)?;
        }
        finish_csv(w)
    }
}

/// Plain means per size, summed in entry order.
pub fn size_means(scores: impl Iterator<Item = (usize, f64)>) -> Vec<SizeMean> {
    let mut acc: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
    for (size, s) in scores {
        let e = acc.entry(size).or_insert((0.0, 0));
        e.0 += s;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(size, (sum, n))| SizeMean {
            size,
            subsets: n,
            mean_normalized_accuracy: sum / n as f64,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationFreeRun {
    pub k: usize,
    pub tuning: SweepResult,
    pub frozen: MergeConfig,
    /// `(n, report)` for n = k..=N, each over the first n tasks.
    pub reports: Vec<(usize, EvalReport)>,
}

/// Binds a merge registry, an evaluator and a base model.
pub struct Harness<'a, E: TaskEvaluator + ?Sized> {
    pub registry: &'a MergeRegistry,
    pub evaluator: &'a E,
    pub base: &'a Checkpoint,
}

impl<'a, E: TaskEvaluator + ?Sized> Harness<'a, E> {
    pub fn new(registry: &'a MergeRegistry, evaluator: &'a E, base: &'a Checkpoint) -> Self {
        Harness { registry, evaluator, base }
    }

    /// Merges `tvs` under `cfg` and evaluates on `tasks`.
    pub fn run(&self, tvs: &[TaskVector], cfg: &MergeConfig, tasks: &[&str]) -> Result<EvalReport> {
        let wrap = |e: Error| Error::Evaluation {
            config: cfg.label(),
            source: Box::new(e),
        };
        let merged = self.registry.merge(self.base, tvs, cfg).map_err(wrap)?;
        evaluate_report(self.evaluator, &merged, tasks).map_err(wrap)
    }

    /// Exhaustive search over the expanded grid, scored on the tasks of
    /// `tvs`. Cells run in parallel; results keep grid order.
    pub fn grid_search(&self, tvs: &[TaskVector], grid: &GridSpec) -> Result<SweepResult> {
        let configs = grid.expand()?;
        for c in &configs {
            self.registry.validate(c)?;
        }
        let tasks: Vec<&str> = tvs.iter().map(TaskVector::task_id).collect();
        let entries = configs
            .into_par_iter()
            .map(|config| {
                let start = Instant::now();
                let report = self.run(tvs, &config, &tasks)?;
                Ok(SweepEntry {
                    config,
                    report,
                    wall_time_secs: start.elapsed().as_secs_f64(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SweepResult::from_entries(entries))
    }

    /// Tunes on the first `k` vectors, freezes the winner, then merges the
    /// first n vectors for every n in k..=N with that config.
    pub fn validation_free_run(&self, tvs_ordered: &[TaskVector], k: usize, grid: &GridSpec) -> Result<ValidationFreeRun> {
        if k == 0 || k > tvs_ordered.len() {
            return Err(Error::InvalidConfig(format!(
                "k must lie in 1..={} (got {k})",
                tvs_ordered.len()
            )));
        }
        let tuning = self.grid_search(&tvs_ordered[..k], grid)?;
        let frozen = tuning.best_entry().config.clone();
        let reports = (k..=tvs_ordered.len())
            .into_par_iter()
            .map(|n| {
                let report = if n == k {
                    tuning.best_entry().report.clone()
                } else {
                    let prefix = &tvs_ordered[..n];
                    let tasks: Vec<&str> = prefix.iter().map(TaskVector::task_id).collect();
                    self.run(prefix, &frozen, &tasks)?
                };
                Ok((n, report))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ValidationFreeRun { k, tuning, frozen, reports })
    }

    fn subsets(tvs: &[TaskVector]) -> Result<Vec<Vec<usize>>> {
        if tvs.is_empty() {
            return Err(Error::EmptyTaskList);
        }
        if tvs.len() > MAX_SUBSET_TASKS {
            return Err(Error::InvalidConfig(format!(
                "subset scans enumerate 2^n subsets; {} tasks exceeds the limit of {MAX_SUBSET_TASKS}",
                tvs.len()
            )));
        }
        let n = tvs.len();
        let mut masks: Vec<u32> = (1..(1u32 << n)).collect();
        masks.sort_by_key(|m| (m.count_ones(), *m));
        Ok(masks
            .into_iter()
            .map(|m| (0..n).filter(|i| m & (1 << i) != 0).collect())
            .collect())
    }

    fn scope_tasks<'t>(tvs: &'t [TaskVector], subset: &[usize], scope: EvalScope) -> Vec<&'t str> {
        match scope {
            EvalScope::AllTasks => tvs.iter().map(TaskVector::task_id).collect(),
            EvalScope::ObservedOnly => subset.iter().map(|&i| tvs[i].task_id()).collect(),
        }
    }

    /// Merges every non-empty subset under one fixed config.
    pub fn subset_scan(&self, tvs: &[TaskVector], cfg: &MergeConfig, scope: EvalScope) -> Result<SubsetScan> {
        self.registry.validate(cfg)?;
        let subsets = Self::subsets(tvs)?;
        let entries = subsets
            .into_par_iter()
            .map(|subset| {
                let picked: Vec<TaskVector> = subset.iter().map(|&i| tvs[i].clone()).collect();
                let tasks = Self::scope_tasks(tvs, &subset, scope);
                let report = self.run(&picked, cfg, &tasks)?;
                Ok(SubsetEntry {
                    tasks: picked.iter().map(|t| t.task_id().to_string()).collect(),
                    size: subset.len(),
                    config: cfg.clone(),
                    report,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SubsetScan::from_entries(scope, entries))
    }

    /// Subset scan where hyperparameters are tuned over `grid`, per subset or
    /// per subset size.
    pub fn tuned_subset_scan(
        &self,
        tvs: &[TaskVector],
        grid: &GridSpec,
        scope: EvalScope,
        tuning: SubsetTuning,
    ) -> Result<SubsetScan> {
        let configs = grid.expand()?;
        for c in &configs {
            self.registry.validate(c)?;
        }
        let subsets = Self::subsets(tvs)?;
        // reports[s][c]
        let reports: Vec<Vec<EvalReport>> = subsets
            .par_iter()
            .map(|subset| {
                let picked: Vec<TaskVector> = subset.iter().map(|&i| tvs[i].clone()).collect();
                let tasks = Self::scope_tasks(tvs, subset, scope);
                configs.iter().map(|c| self.run(&picked, c, &tasks)).collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;

        let chosen: Vec<usize> = match tuning {
            SubsetTuning::PerSubset => reports
                .iter()
                .map(|row| best_index(row.iter().map(|r| r.average_normalized_accuracy)))
                .collect(),
            SubsetTuning::PerSize => {
                let mut per_size = std::collections::BTreeMap::new();
                for size in 1..=tvs.len() {
                    let rows: Vec<usize> = (0..subsets.len()).filter(|&s| subsets[s].len() == size).collect();
                    let best = best_index((0..configs.len()).map(|c| {
                        rows.iter().map(|&s| reports[s][c].average_normalized_accuracy).sum::<f64>() / rows.len() as f64
                    }));
                    per_size.insert(size, best);
                }
                subsets.iter().map(|s| per_size[&s.len()]).collect()
            }
        };

        let entries = subsets
            .iter()
            .zip(reports)
            .zip(chosen)
            .map(|((subset, mut row), c)| SubsetEntry {
                tasks: subset.iter().map(|&i| tvs[i].task_id().to_string()).collect(),
                size: subset.len(),
                config: configs[c].clone(),
                report: row.swap_remove(c),
            })
            .collect();
        Ok(SubsetScan::from_entries(scope, entries))
    }
}
