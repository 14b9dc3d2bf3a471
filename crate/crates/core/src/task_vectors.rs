//! Task vectors: element-wise deltas between a fine-tuned checkpoint and the
//! base it was trained from.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor_store::{self, assert_compatible, Checkpoint, TensorRecord};

pub const KIND_KEY: &str = "kind";
pub const KIND_TASK_VECTOR: &str = "task_vector";
pub const TASK_ID_KEY: &str = "task_id";
pub const FINGERPRINT_KEY: &str = "base_fingerprint";

/// 64-bit content hash over names, shapes and values (metadata excluded).
pub fn fingerprint(ckpt: &Checkpoint) -> u64 {
    let mut h = Sha256::new();
    h.update((ckpt.len() as u64).to_le_bytes());
    for t in ckpt.tensors() {
        h.update((t.name().len() as u64).to_le_bytes());
        h.update(t.name().as_bytes());
        h.update((t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    task_id: String,
    base_fingerprint: u64,
    deltas: Checkpoint,
}

impl TaskVector {
    pub fn new(task_id: impl Into<String>, base_fingerprint: u64, deltas: Checkpoint) -> Self {
        TaskVector {
            task_id: task_id.into(),
            base_fingerprint,
            deltas: deltas.with_metadata(BTreeMap::new()),
        }
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn base_fingerprint(&self) -> u64 {
        self.base_fingerprint
    }

    pub fn deltas(&self) -> &Checkpoint {
        &self.deltas
    }

    pub fn into_deltas(self) -> Checkpoint {
        self.deltas
    }

    /// Replaces the deltas, keeping identity. Shapes must be unchanged.
    pub fn with_deltas(&self, deltas: Checkpoint) -> Result<Self> {
        assert_compatible(&self.deltas, &deltas)?;
        Ok(TaskVector::new(self.task_id.clone(), self.base_fingerprint, deltas))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = BTreeMap::new();
        meta.insert(KIND_KEY.to_string(), KIND_TASK_VECTOR.to_string());
        meta.insert(TASK_ID_KEY.to_string(), self.task_id.clone());
        meta.insert(
            FINGERPRINT_KEY.to_string(),
            format!("{:016x}", self.base_fingerprint),
        );
        self.deltas.clone().with_metadata(meta)
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let meta = ckpt.metadata();
        match meta.get(KIND_KEY).map(String::as_str) {
            Some(KIND_TASK_VECTOR) => {}
            other => {
                return Err(Error::Metadata(format!(
                    "expected kind={KIND_TASK_VECTOR}, found {other:?}"
                )))
            }
        }
        let task_id = meta
            .get(TASK_ID_KEY)
            .ok_or_else(|| Error::Metadata("task vector lacks `task_id`".into()))?
            .clone();
        let fp = meta
            .get(FINGERPRINT_KEY)
            .ok_or_else(|| Error::Metadata("task vector lacks `base_fingerprint`".into()))?;
        let base_fingerprint = u64::from_str_radix(fp, 16)
            .map_err(|_| Error::Metadata(format!("bad base_fingerprint `{fp}`")))?;
        Ok(TaskVector::new(task_id, base_fingerprint, ckpt))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        tensor_store::write_checkpoint(&self.to_checkpoint(), path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(tensor_store::read_checkpoint(path)?)
    }
}

/// `finetuned - base`, element-wise in float32.
pub fn diff(base: &Checkpoint, finetuned: &Checkpoint, task_id: &str) -> Result<TaskVector> {
    assert_compatible(base, finetuned)?;
    let tensors = base
        .tensors()
        .par_iter()
        .zip(finetuned.tensors().par_iter())
        .map(|(b, f)| {
            let data = b.data().iter().zip(f.data()).map(|(&b, &f)| f - b).collect();
            b.with_data(data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskVector::new(
        task_id,
        fingerprint(base),
        Checkpoint::from_tensors(tensors)?,
    ))
}

/// Adds a float64 update to a float32 base value. Positions with a zero
/// update keep the base bit pattern, so masked-out entries return exactly to
/// the base weights.
#[inline]
pub(crate) fn add_scaled(base: f32, alpha: f64, update: f64) -> f32 {
    if update == 0.0 || alpha == 0.0 {
        base
    } else {
        (base as f64 + alpha * update) as f32
    }
}

/// `base + alpha * tv`.
pub fn apply(base: &Checkpoint, tv: &TaskVector, alpha: f64) -> Result<Checkpoint> {
    assert_compatible(base, tv.deltas())?;
    let tensors = base
        .tensors()
        .par_iter()
        .zip(tv.deltas().tensors().par_iter())
        .map(|(b, d)| {
            let data = b
                .data()
                .iter()
                .zip(d.data())
                .map(|(&b, &d)| add_scaled(b, alpha, d as f64))
                .collect();
            b.with_data(data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Checkpoint::new(tensors, base.metadata().clone())?)
}

/// Validates a task-vector family: non-empty, unique ids, one shared
/// fingerprint, identical structure. Returns indices in ascending task-id
/// order, the fixed summation order used by every merge.
pub(crate) fn summation_order(tvs: &[&TaskVector]) -> Result<Vec<usize>> {
    let first = tvs.first().ok_or(Error::EmptyTaskList)?;
    for tv in &tvs[1..] {
        if tv.base_fingerprint != first.base_fingerprint {
            return Err(Error::FingerprintMismatch {
                task_id: tv.task_id.clone(),
                expected: first.base_fingerprint,
                found: tv.base_fingerprint,
            });
        }
        assert_compatible(first.deltas(), tv.deltas())?;
    }
    let mut order: Vec<usize> = (0..tvs.len()).collect();
    order.sort_by(|&a, &b| tvs[a].task_id.cmp(&tvs[b].task_id));
    if let Some(w) = order.windows(2).find(|w| tvs[w[0]].task_id == tvs[w[1]].task_id) {
        return Err(Error::DuplicateTaskId(tvs[w[0]].task_id.clone()));
    }
    Ok(order)
}

/// Per-element float64 sums `Σ weight_t * tv_t[name][i]`, accumulated in
/// ascending task-id order. One entry per tensor, in name order.
pub(crate) fn weighted_sums(tvs: &[&TaskVector], weights: &[f64]) -> Result<Vec<Vec<f64>>> {
    if tvs.len() != weights.len() {
        return Err(Error::LengthMismatch {
            what: "task vectors vs weights",
            left: tvs.len(),
            right: weights.len(),
        });
    }
    let order = summation_order(tvs)?;
    let n_tensors = tvs[0].deltas().len();
    Ok((0..n_tensors)
        .into_par_iter()
        .map(|k| {
            let mut acc = vec![0.0f64; tvs[0].deltas().tensors()[k].numel()];
            for &t in &order {
                let w = weights[t];
                for (a, &v) in acc.iter_mut().zip(tvs[t].deltas().tensors()[k].data()) {
                    *a += w * v as f64;
                }
            }
            acc
        })
        .collect())
}

/// Weighted sum of task vectors, float64-accumulated in ascending task-id
/// order and rounded once per element. The result takes the task id of the
/// form `a+b+...` and shares the inputs' fingerprint.
pub fn linear_combine(tvs: &[TaskVector], weights: &[f64]) -> Result<TaskVector> {
    let refs: Vec<&TaskVector> = tvs.iter().collect();
    let sums = weighted_sums(&refs, weights)?;
    let template = refs[0].deltas();
    let tensors = template
        .tensors()
        .iter()
        .zip(sums)
        .map(|(t, s)| t.with_data(s.into_iter().map(|v| v as f32).collect()))
        .collect::<Result<Vec<TensorRecord>>>()?;
    let mut ids: Vec<&str> = tvs.iter().map(|t| t.task_id()).collect();
    ids.sort_unstable();
    Ok(TaskVector::new(
        ids.join("+"),
        refs[0].base_fingerprint,
        Checkpoint::from_tensors(tensors)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn ckpt(vals: &[(&str, Vec<f32>)]) -> Checkpoint {
        Checkpoint::from_tensors(
            vals.iter()
                .map(|(n, v)| TensorRecord::new(*n, vec![v.len()], v.clone()).unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn random_ckpt(seed: u64, tensors: usize) -> Checkpoint {
        let mut rng = crate::seed::rng_for(seed, "tv-test");
        Checkpoint::from_tensors(
            (0..tensors)
                .map(|i| {
                    let n = rng.random_range(1..40);
                    let data = (0..n).map(|_| rng.random_range(-2.0f32..2.0)).collect();
                    TensorRecord::new(format!("t{i:02}"), vec![n], data).unwrap()
                })
                .collect(),
        )
        .unwrap()
    }

    fn perturb(c: &Checkpoint, seed: u64) -> Checkpoint {
        let mut rng = crate::seed::rng_for(seed, "perturb");
        c.map_tensors(|t| t.data().iter().map(|v| v + rng.random_range(-0.1f32..0.1)).collect::<Vec<_>>())
            .unwrap()
    }

    #[test]
    fn diff_definition() {
        let base = ckpt(&[("w", vec![1.0, 2.0])]);
        let ft = ckpt(&[("w", vec![1.5, 1.0])]);
        let tv = diff(&base, &ft, "t").unwrap();
        assert_eq!(tv.deltas().get("w").unwrap().data(), &[0.5, -1.0]);
        let zero = diff(&base, &base, "t").unwrap();
        assert!(zero.deltas().tensors().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn diff_matches_scalar_loop() {
        let base = random_ckpt(1, 10);
        let ft = perturb(&base, 2);
        let tv = diff(&base, &ft, "t").unwrap();
        for (i, t) in base.tensors().iter().enumerate() {
            let f = &ft.tensors()[i];
            let d = &tv.deltas().tensors()[i];
            for j in 0..t.numel() {
                let expected = f.data()[j] - t.data()[j];
                assert_eq!(d.data()[j].to_bits(), expected.to_bits());
            }
        }
    }

    #[test]
    fn diff_rejects_incompatible() {
        let a = ckpt(&[("w", vec![1.0, 2.0])]);
        let b = ckpt(&[("v", vec![1.0, 2.0])]);
        assert!(diff(&a, &b, "t").is_err());
    }

    #[test]
    fn apply_examples() {
        let base = ckpt(&[("w", vec![1.0, 1.0])]);
        let tv = TaskVector::new("t", fingerprint(&base), ckpt(&[("w", vec![2.0, -2.0])]));
        assert_eq!(apply(&base, &tv, 0.5).unwrap().get("w").unwrap().data(), &[2.0, 0.0]);
        let signed = ckpt(&[("w", vec![-0.0, 3.0])]);
        assert!(apply(&signed, &tv, 0.0).unwrap().bitwise_eq(&signed));
    }

    #[test]
    fn apply_inverts_diff() {
        let base = random_ckpt(3, 10);
        let ft = perturb(&base, 4);
        let back = apply(&base, &diff(&base, &ft, "t").unwrap(), 1.0).unwrap();
        for (x, y) in back.tensors().iter().zip(ft.tensors()) {
            for (&a, &b) in x.data().iter().zip(y.data()) {
                let tol = (1e-6 * b.abs()).max(1e-7);
                assert!((a - b).abs() <= tol, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn combine_identity_and_cancellation() {
        let base = random_ckpt(5, 4);
        let v = diff(&base, &perturb(&base, 6), "a").unwrap();
        let one = linear_combine(std::slice::from_ref(&v), &[1.0]).unwrap();
        assert!(one.deltas().bitwise_eq(v.deltas()));
        let neg = TaskVector::new(
            "b",
            v.base_fingerprint(),
            v.deltas().map_tensors(|t| t.data().iter().map(|x| -x).collect()).unwrap(),
        );
        let zero = linear_combine(&[v, neg], &[1.0, 1.0]).unwrap();
        assert!(zero.deltas().tensors().iter().all(|t| t.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn combine_is_permutation_invariant() {
        let base = random_ckpt(7, 6);
        let tvs: Vec<TaskVector> = ["c", "a", "b"]
            .iter()
            .enumerate()
            .map(|(i, id)| diff(&base, &perturb(&base, 10 + i as u64), id).unwrap())
            .collect();
        let w = [0.2, 0.3, 0.5];
        let reference = linear_combine(&tvs, &w).unwrap();
        for perm in [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
            let p: Vec<TaskVector> = perm.iter().map(|&i| tvs[i].clone()).collect();
            let pw: Vec<f64> = perm.iter().map(|&i| w[i]).collect();
            assert!(linear_combine(&p, &pw).unwrap().deltas().bitwise_eq(reference.deltas()));
        }
        // fixed-order oracle: ascending task id is a, b, c
        let sorted = [&tvs[1], &tvs[2], &tvs[0]];
        let sw = [w[1], w[2], w[0]];
        for (k, t) in reference.deltas().tensors().iter().enumerate() {
            for i in 0..t.numel() {
                let mut acc = 0.0f64;
                for (tv, &wt) in sorted.iter().zip(&sw) {
                    acc += wt * tv.deltas().tensors()[k].data()[i] as f64;
                }
                assert_eq!(t.data()[i].to_bits(), (acc as f32).to_bits());
            }
        }
    }

    #[test]
    fn combine_with_power_of_two_weight_matches_apply() {
        let base = random_ckpt(8, 5);
        let v = diff(&base, &perturb(&base, 9), "a").unwrap();
        for a in [0.5, 2.0, -1.0, 0.25] {
            let c = linear_combine(std::slice::from_ref(&v), &[a]).unwrap();
            let lhs = apply(&base, &c, 1.0).unwrap();
            let rhs = apply(&base, &v, a).unwrap();
            assert!(lhs.bitwise_eq(&rhs));
        }
    }

    #[test]
    fn combine_errors() {
        let base = random_ckpt(11, 3);
        let v = diff(&base, &perturb(&base, 12), "a").unwrap();
        assert!(matches!(linear_combine(&[], &[]), Err(Error::EmptyTaskList)));
        assert!(matches!(
            linear_combine(std::slice::from_ref(&v), &[1.0, 2.0]),
            Err(Error::LengthMismatch { .. })
        ));
        let other = TaskVector::new("b", v.base_fingerprint() ^ 1, v.deltas().clone());
        assert!(matches!(
            linear_combine(&[v.clone(), other], &[1.0, 1.0]),
            Err(Error::FingerprintMismatch { .. })
        ));
        assert!(matches!(
            linear_combine(&[v.clone(), v], &[1.0, 1.0]),
            Err(Error::DuplicateTaskId(_))
        ));
    }

    #[test]
    fn serialization_carries_identity() {
        let base = random_ckpt(13, 3);
        let v = diff(&base, &perturb(&base, 14), "mnist").unwrap();
        let ck = v.to_checkpoint();
        assert_eq!(ck.metadata()[KIND_KEY], KIND_TASK_VECTOR);
        let back = TaskVector::from_checkpoint(ck).unwrap();
        assert_eq!(back, v);
        assert!(TaskVector::from_checkpoint(base).is_err());
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = random_ckpt(15, 3);
        assert_eq!(fingerprint(&a), fingerprint(&a.clone()));
        assert_ne!(fingerprint(&a), fingerprint(&perturb(&a, 16)));
    }
}
