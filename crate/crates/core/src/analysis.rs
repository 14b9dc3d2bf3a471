//! Metrics over merged models and task vectors.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{apply_mask, build_mask, floor_fraction, magnitude_order, MaskSpec};
use crate::seed::derive_seed;
use crate::task_vectors::TaskVector;
use crate::tensor_store::assert_compatible;

/// Merged accuracy over the fine-tuned model's accuracy on the same task.
/// Values above 1 are legal.
pub fn normalized_accuracy(merged_acc: f64, finetuned_acc: f64) -> Result<f64> {
    for (what, v) in [("merged", merged_acc), ("fine-tuned", finetuned_acc)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidConfig(format!("{what} accuracy {v} outside [0, 1]")));
        }
    }
    if finetuned_acc == 0.0 {
        return Err(Error::UndefinedRatio);
    }
    Ok(merged_acc / finetuned_acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub merged_accuracy: f64,
    pub finetuned_accuracy: f64,
    pub normalized_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_task: BTreeMap<String, TaskScore>,
    pub average_normalized_accuracy: f64,
    pub average_accuracy: f64,
    /// Evaluation order; the average runs over these.
    pub observed_tasks: Vec<String>,
}

impl EvalReport {
    /// `scores` holds `(task_id, merged_accuracy, finetuned_accuracy)` in
    /// observation order.
    pub fn new<S: Into<String>>(scores: impl IntoIterator<Item = (S, f64, f64)>) -> Result<Self> {
        let mut per_task = BTreeMap::new();
        let mut observed_tasks = Vec::new();
        for (id, merged, ft) in scores {
            let id = id.into();
            let score = TaskScore {
                merged_accuracy: merged,
                finetuned_accuracy: ft,
                normalized_accuracy: normalized_accuracy(merged, ft)?,
            };
            if per_task.insert(id.clone(), score).is_some() {
                return Err(Error::DuplicateTaskId(id));
            }
            observed_tasks.push(id);
        }
        if observed_tasks.is_empty() {
            return Err(Error::EmptyTaskList);
        }
        let n = observed_tasks.len() as f64;
        let mut norm_sum = 0.0;
        let mut acc_sum = 0.0;
        for id in &observed_tasks {
            norm_sum += per_task[id].normalized_accuracy;
            acc_sum += per_task[id].merged_accuracy;
        }
        Ok(EvalReport {
            per_task,
            average_normalized_accuracy: norm_sum / n,
            average_accuracy: acc_sum / n,
            observed_tasks,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Report(e.to_string()))
    }

    /// One row per observed task.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Report(e.to_string());
        w.write_record(["task_id", "merged_accuracy", "finetuned_accuracy", "normalized_accuracy"])
            .map_err(err)?;
        for id in &self.observed_tasks {
            let s = &self.per_task[id];
            w.write_record([
                id.clone(),
                s.merged_accuracy.to_string(),
                s.finetuned_accuracy.to_string(),
                s.normalized_accuracy.to_string(),
            ])
            .map_err(err)?;
        }
        finish_csv(w)
    }
}

pub(crate) fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.observed_tasks.iter().map(String::len).max().unwrap_or(4).max(4);
        writeln!(f, "{:<width$}  {:>8}  {:>8}  {:>8}", "task", "merged", "ft", "norm")?;
        for id in &self.observed_tasks {
            let s = &self.per_task[id];
            writeln!(
                f,
                "{:<width$}  {:>8.4}  {:>8.4}  {:>8.4}",
                id, s.merged_accuracy, s.finetuned_accuracy, s.normalized_accuracy
            )?;
        }
        write!(
            f,
            "average normalized accuracy {:.4} (absolute {:.4})",
            self.average_normalized_accuracy, self.average_accuracy
        )
    }
}

/// Pairwise cosine similarities; `None` where either vector has zero norm.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityMatrix {
    pub task_ids: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl SimilarityMatrix {
    /// Mean of |cos| over defined off-diagonal entries.
    pub fn mean_abs_off_diagonal(&self) -> Option<f64> {
        let n = self.task_ids.len();
        let (mut sum, mut count) = (0.0, 0usize);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    if let Some(v) = self.values[i][j] {
                        sum += v.abs();
                        count += 1;
                    }
                }
            }
        }
        (count > 0).then(|| sum / count as f64)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Report(e.to_string());
        let mut header = vec!["task_id".to_string()];
        header.extend(self.task_ids.iter().cloned());
        w.write_record(&header).map_err(err)?;
        for (id, row) in self.task_ids.iter().zip(&self.values) {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(|v| v.map_or_else(|| "undefined".into(), |x| x.to_string())));
            w.write_record(&rec).map_err(err)?;
        }
        finish_csv(w)
    }
}

impl fmt::Display for SimilarityMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.task_ids.iter().map(String::len).max().unwrap_or(4).max(7);
        write!(f, "{:<width$}", "")?;
        for id in &self.task_ids {
            write!(f, "  {:>width$}", id)?;
        }
        for (id, row) in self.task_ids.iter().zip(&self.values) {
            write!(f, "\n{:<width$}", id)?;
            for v in row {
                match v {
                    Some(x) => write!(f, "  {:>width$.4}", x)?,
                    None => write!(f, "  {:>width$}", "undef")?,
                }
            }
        }
        Ok(())
    }
}

fn flatten(tv: &TaskVector) -> Vec<f64> {
    tv.deltas()
        .tensors()
        .iter()
        .flat_map(|t| t.data().iter().map(|&v| v as f64))
        .collect()
}

/// Cosine similarity over each vector flattened across all tensors. When a
/// mask spec is given, every vector is first masked with its own mask.
pub fn cosine_matrix(tvs: &[TaskVector], mask: Option<(&MaskSpec, u64)>) -> Result<SimilarityMatrix> {
    if tvs.len() < 2 {
        return Err(Error::InvalidConfig("cosine analysis needs at least two task vectors".into()));
    }
    for tv in &tvs[1..] {
        assert_compatible(tvs[0].deltas(), tv.deltas())?;
    }
    let flat: Vec<Vec<f64>> = tvs
        .par_iter()
        .map(|tv| match mask {
            None => Ok(flatten(tv)),
            Some((spec, seed)) => {
                let s = derive_seed(seed, &format!("merge/{}", tv.task_id()));
                Ok(flatten(&apply_mask(tv, &build_mask(tv, spec, s)?)?))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let norms: Vec<f64> = flat.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let n = tvs.len();
    let values = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| {
                    if norms[i] == 0.0 || norms[j] == 0.0 {
                        None
                    } else if i == j {
                        Some(1.0)
                    } else {
                        // symmetric entries share one accumulation order
                        let (a, b) = if i < j { (i, j) } else { (j, i) };
                        let dot: f64 = flat[a].iter().zip(&flat[b]).map(|(x, y)| x * y).sum();
                        Some((dot / (norms[a] * norms[b])).clamp(-1.0, 1.0))
                    }
                })
                .collect()
        })
        .collect();
    Ok(SimilarityMatrix {
        task_ids: tvs.iter().map(|t| t.task_id().to_string()).collect(),
        values,
    })
}

pub const DEFAULT_QUANTILES: [f64; 5] = [0.1, 0.5, 0.9, 0.99, 0.999];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaStats {
    pub name: String,
    pub numel: usize,
    pub min_abs: f64,
    pub max_abs: f64,
    pub mean_abs: f64,
    /// `(q, |value| at ascending rank floor(q * N))`, rank clamped to `N - 1`.
    pub quantiles: Vec<(f64, f64)>,
}

/// Per-tensor magnitude statistics; empty tensors report zeros.
pub fn delta_stats(tv: &TaskVector, quantiles: &[f64]) -> Vec<DeltaStats> {
    tv.deltas()
        .tensors()
        .iter()
        .map(|t| {
            let n = t.numel();
            if n == 0 {
                return DeltaStats {
                    name: t.name().to_string(),
                    numel: 0,
                    min_abs: 0.0,
                    max_abs: 0.0,
                    mean_abs: 0.0,
                    quantiles: quantiles.iter().map(|&q| (q, 0.0)).collect(),
                };
            }
            let order = magnitude_order(t.data());
            let abs_at = |r: usize| t.data()[order[r]].abs() as f64;
            let mean = t.data().iter().map(|v| v.abs() as f64).sum::<f64>() / n as f64;
            DeltaStats {
                name: t.name().to_string(),
                numel: n,
                min_abs: abs_at(0),
                max_abs: abs_at(n - 1),
                mean_abs: mean,
                quantiles: quantiles
                    .iter()
                    .map(|&q| (q, abs_at(floor_fraction(q, n).min(n - 1))))
                    .collect(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_store::{Checkpoint, TensorRecord};
    use rand::Rng;

    fn tv(id: &str, tensors: Vec<(&str, Vec<f32>)>) -> TaskVector {
        TaskVector::new(
            id,
            0,
            Checkpoint::from_tensors(
                tensors
                    .into_iter()
                    .map(|(n, v)| TensorRecord::new(n, vec![v.len()], v).unwrap())
                    .collect(),
            )
            .unwrap(),
        )
    }

    #[test]
    fn normalized_accuracy_examples() {
        assert!((normalized_accuracy(0.75, 0.90).unwrap() - 0.833_333_333_333_333_4).abs() < 1e-15);
        assert_eq!(normalized_accuracy(0.90, 0.90).unwrap(), 1.0);
        assert!((normalized_accuracy(0.92, 0.90).unwrap() - 1.022_222_222_222_222).abs() < 1e-12);
        assert!(matches!(normalized_accuracy(0.5, 0.0), Err(Error::UndefinedRatio)));
        assert!(normalized_accuracy(1.5, 0.5).is_err());
    }

    #[test]
    fn report_self_reference_is_one() {
        let r = EvalReport::new([("a", 0.7, 0.7), ("b", 0.3, 0.3)]).unwrap();
        assert!(r.per_task.values().all(|s| s.normalized_accuracy == 1.0));
        assert_eq!(r.average_normalized_accuracy, 1.0);
        assert_eq!(r.observed_tasks, vec!["a", "b"]);
        assert!(r.to_csv().unwrap().starts_with("task_id,"));
        assert!(EvalReport::new([("a", 0.7, 0.7), ("a", 0.3, 0.3)]).is_err());
    }

    #[test]
    fn cosine_examples() {
        let v = vec![1.0, -2.0, 0.5];
        let neg: Vec<f32> = v.iter().map(|x| -x).collect();
        let m = cosine_matrix(&[tv("a", vec![("w", v.clone())]), tv("b", vec![("w", neg)])], None).unwrap();
        assert_eq!(m.values[0][0], Some(1.0));
        assert!((m.values[0][1].unwrap() + 1.0).abs() < 1e-15);
        let m = cosine_matrix(
            &[tv("a", vec![("w", vec![1.0, 0.0])]), tv("b", vec![("w", vec![0.0, 3.0])])],
            None,
        )
        .unwrap();
        assert_eq!(m.values[0][1], Some(0.0));
        let m = cosine_matrix(
            &[tv("a", vec![("w", vec![1.0, 0.0])]), tv("z", vec![("w", vec![0.0, 0.0])])],
            None,
        )
        .unwrap();
        assert_eq!(m.values[0][1], None);
        assert_eq!(m.values[1][1], None);
        assert!(m.to_csv().unwrap().contains("undefined"));
    }

    #[test]
    fn cosine_symmetry_scaling_and_keep_all_mask() {
        let mut rng = crate::seed::rng_for(3, "cos-test");
        let mut gen = |id: &str| {
            tv(id, vec![
                ("a", (0..50).map(|_| rng.random_range(-1.0f32..1.0)).collect()),
                ("b", (0..20).map(|_| rng.random_range(-1.0f32..1.0)).collect()),
            ])
        };
        let tvs = vec![gen("x"), gen("y"), gen("z")];
        let m = cosine_matrix(&tvs, None).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((m.values[i][j].unwrap() - m.values[j][i].unwrap()).abs() <= 1e-7);
            }
        }
        let scaled: Vec<TaskVector> = tvs
            .iter()
            .map(|t| t.with_deltas(t.deltas().map_tensors(|x| x.data().iter().map(|v| v * 4.0).collect()).unwrap()).unwrap())
            .collect();
        let ms = cosine_matrix(&scaled, None).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((m.values[i][j].unwrap() - ms.values[i][j].unwrap()).abs() < 1e-12);
            }
        }
        let keep = cosine_matrix(&tvs, Some((&MaskSpec::two_tailed(0.0, 1.0), 0))).unwrap();
        assert_eq!(keep, m);
    }

    #[test]
    fn stats_examples() {
        let s = delta_stats(&tv("a", vec![("w", vec![1.0, -3.0, 2.0]), ("z", vec![0.0; 4])]), &[0.5]);
        assert_eq!(s[0].max_abs, 3.0);
        assert_eq!(s[0].min_abs, 1.0);
        assert_eq!(s[0].mean_abs, 2.0);
        assert_eq!(s[0].quantiles, vec![(0.5, 2.0)]);
        assert_eq!((s[1].min_abs, s[1].max_abs, s[1].mean_abs), (0.0, 0.0, 0.0));
    }

    #[test]
    fn stats_quantiles_match_full_sort() {
        let mut rng = crate::seed::rng_for(4, "stats-test");
        let v: Vec<f32> = (0..997).map(|_| rng.random_range(-5.0f32..5.0)).collect();
        let s = delta_stats(&tv("a", vec![("w", v.clone())]), &DEFAULT_QUANTILES);
        let mut sorted: Vec<f64> = v.iter().map(|x| x.abs() as f64).collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for &(q, val) in &s[0].quantiles {
            let r = ((q * 997.0).floor() as usize).min(996);
            assert_eq!(val, sorted[r], "q={q}");
        }
    }
}
