//! Merge strategies.
//!
//! Every strategy turns a base checkpoint plus a family of task vectors into
//! a merged checkpoint. Strategies live behind [`MergeStrategy`] and are
//! looked up by name in a [`MergeRegistry`], so front ends can select them
//! from configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{apply_mask, build_mask, MaskScope, MaskSpec, MaskVariant};
use crate::seed::derive_seed;
use crate::task_vectors::{add_scaled, fingerprint, summation_order, weighted_sums, TaskVector};
use crate::tensor_store::{assert_compatible, Checkpoint};

pub const TOOL_VERSION: &str = concat!("crumbs ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    Breadcrumbs,
    TaskArithmetic,
    Ties,
    RandomSparse,
}

impl MergeMethod {
    pub const ALL: [MergeMethod; 4] = [
        MergeMethod::Breadcrumbs,
        MergeMethod::TaskArithmetic,
        MergeMethod::Ties,
        MergeMethod::RandomSparse,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MergeMethod::Breadcrumbs => "breadcrumbs",
            MergeMethod::TaskArithmetic => "task_arithmetic",
            MergeMethod::Ties => "ties",
            MergeMethod::RandomSparse => "random_sparse",
        }
    }
}

impl fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MergeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MergeMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s || m.as_str().replace('_', "-") == s)
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    pub method: MergeMethod,
    pub alpha: f64,
    /// Read by breadcrumbs and random_sparse.
    pub mask_spec: MaskSpec,
    /// Read by ties only.
    pub ties_keep_fraction: f64,
    pub seed: u64,
    /// Allows a base whose fingerprint differs from the one the task vectors
    /// were diffed against (e.g. merging into an already fine-tuned model).
    #[serde(default)]
    pub allow_base_mismatch: bool,
}

impl MergeConfig {
    pub fn breadcrumbs(alpha: f64, beta: f64, gamma: f64) -> Self {
        MergeConfig {
            method: MergeMethod::Breadcrumbs,
            alpha,
            mask_spec: MaskSpec::two_tailed(beta, gamma),
            ties_keep_fraction: 1.0,
            seed: 0,
            allow_base_mismatch: false,
        }
    }

    pub fn task_arithmetic(alpha: f64) -> Self {
        MergeConfig {
            method: MergeMethod::TaskArithmetic,
            mask_spec: MaskSpec::keep_all(),
            ..Self::breadcrumbs(alpha, 0.0, 1.0)
        }
    }

    pub fn random_sparse(alpha: f64, beta: f64, gamma: f64, seed: u64) -> Self {
        MergeConfig {
            method: MergeMethod::RandomSparse,
            mask_spec: MaskSpec::two_tailed(beta, gamma).with_variant(MaskVariant::Random),
            seed,
            ..Self::breadcrumbs(alpha, beta, gamma)
        }
    }

    pub fn ties(alpha: f64, keep_fraction: f64) -> Self {
        MergeConfig {
            method: MergeMethod::Ties,
            ties_keep_fraction: keep_fraction,
            ..Self::task_arithmetic(alpha)
        }
    }

    /// Compact human-readable label.
    pub fn label(&self) -> String {
        match self.method {
            MergeMethod::TaskArithmetic => format!("{} alpha={}", self.method, self.alpha),
            MergeMethod::Ties => format!(
                "{} alpha={} keep={}",
                self.method, self.alpha, self.ties_keep_fraction
            ),
            _ => format!(
                "{} alpha={} beta={} gamma={} variant={}",
                self.method, self.alpha, self.mask_spec.beta, self.mask_spec.gamma, self.mask_spec.variant
            ),
        }
    }

    fn common_checks(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "alpha must be a finite non-negative number, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// A merge algorithm selectable by name.
pub trait MergeStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    /// Checks the method-specific fields of `cfg`.
    fn validate(&self, cfg: &MergeConfig) -> Result<()>;

    fn merge(&self, base: &Checkpoint, tvs: &[TaskVector], cfg: &MergeConfig) -> Result<Checkpoint>;
}

pub struct Breadcrumbs;
pub struct TaskArithmetic;
pub struct RandomSparse;
pub struct Ties;

impl MergeStrategy for Breadcrumbs {
    fn name(&self) -> &'static str {
        MergeMethod::Breadcrumbs.as_str()
    }

    fn validate(&self, cfg: &MergeConfig) -> Result<()> {
        cfg.common_checks()?;
        cfg.mask_spec.validate()?;
        if cfg.mask_spec.variant == MaskVariant::Random {
            return Err(Error::InvalidConfig(
                "breadcrumbs uses magnitude masks; use random_sparse for random masks".into(),
            ));
        }
        Ok(())
    }

    fn merge(&self, base: &Checkpoint, tvs: &[TaskVector], cfg: &MergeConfig) -> Result<Checkpoint> {
        self.validate(cfg)?;
        masked_sum_merge(base, tvs, cfg)
    }
}

impl MergeStrategy for TaskArithmetic {
    fn name(&self) -> &'static str {
        MergeMethod::TaskArithmetic.as_str()
    }

    fn validate(&self, cfg: &MergeConfig) -> Result<()> {
        cfg.common_checks()
    }

    fn merge(&self, base: &Checkpoint, tvs: &[TaskVector], cfg: &MergeConfig) -> Result<Checkpoint> {
        self.validate(cfg)?;
        let refs: Vec<&TaskVector> = tvs.iter().collect();
        check_family(base, &refs, cfg)?;
        let merged = scaled_sum_onto(base, &refs, cfg.alpha)?;
        Ok(stamp(merged, tvs, cfg))
    }
}

impl MergeStrategy for RandomSparse {
    fn name(&self) -> &'static str {
        MergeMethod::RandomSparse.as_str()
    }

    fn validate(&self, cfg: &MergeConfig) -> Result<()> {
        cfg.common_checks()?;
        cfg.mask_spec.validate()?;
        if cfg.mask_spec.variant != MaskVariant::Random {
            return Err(Error::InvalidConfig(format!(
                "random_sparse requires mask variant `random`, got `{}`",
                cfg.mask_spec.variant
            )));
        }
        Ok(())
    }

    fn merge(&self, base: &Checkpoint, tvs: &[TaskVector], cfg: &MergeConfig) -> Result<Checkpoint> {
        self.validate(cfg)?;
        masked_sum_merge(base, tvs, cfg)
    }
}

impl MergeStrategy for Ties {
    fn name(&self) -> &'static str {
        MergeMethod::Ties.as_str()
    }

    fn validate(&self, cfg: &MergeConfig) -> Result<()> {
        cfg.common_checks()?;
        let k = cfg.ties_keep_fraction;
        if !(k > 0.0 && k <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "ties keep fraction must lie in (0, 1], got {k}"
            )));
        }
        Ok(())
    }

    fn merge(&self, base: &Checkpoint, tvs: &[TaskVector], cfg: &MergeConfig) -> Result<Checkpoint> {
        self.validate(cfg)?;
        let refs: Vec<&TaskVector> = tvs.iter().collect();
        let order = check_family(base, &refs, cfg)?;
        let trim = ties_trim_spec(cfg.ties_keep_fraction);
        let trimmed = order
            .par_iter()
            .map(|&i| Ok(apply_mask(&tvs[i], &build_mask(&tvs[i], &trim, 0)?)?))
            .collect::<Result<Vec<_>>>()?;

        let tensors = base
            .tensors()
            .par_iter()
            .enumerate()
            .map(|(k, b)| {
                let data = (0..b.numel())
                    .map(|i| {
                        let column = trimmed.iter().map(|tv| tv.deltas().tensors()[k].data()[i]);
                        add_scaled(b.data()[i], cfg.alpha, elect_disjoint_mean(column))
                    })
                    .collect();
                b.with_data(data)
            })
            .collect::<Result<Vec<_>>>()?;
        let merged = Checkpoint::new(tensors, BTreeMap::new())?;
        Ok(stamp(merged, tvs, cfg))
    }
}

/// Global low-magnitude trim that keeps the top `keep` fraction of entries.
pub fn ties_trim_spec(keep: f64) -> MaskSpec {
    MaskSpec::two_tailed(1.0 - keep, 1.0)
        .with_scope(MaskScope::Global)
        .with_variant(MaskVariant::BottomOnly)
}

/// Sign election by the sign of the summed values (zero elects positive),
/// then the mean over entries whose sign agrees with the elected one.
pub fn elect_disjoint_mean(values: impl Iterator<Item = f32> + Clone) -> f64 {
    let total: f64 = values.clone().map(|v| v as f64).sum();
    let positive = total >= 0.0;
    let (mut sum, mut count) = (0.0f64, 0usize);
    for v in values {
        if (positive && v > 0.0) || (!positive && v < 0.0) {
            sum += v as f64;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Checks family invariants and the base fingerprint; returns the fixed
/// summation order.
fn check_family(base: &Checkpoint, tvs: &[&TaskVector], cfg: &MergeConfig) -> Result<Vec<usize>> {
    let order = summation_order(tvs)?;
    assert_compatible(base, tvs[0].deltas())?;
    if !cfg.allow_base_mismatch {
        let fp = fingerprint(base);
        if let Some(tv) = tvs.iter().find(|tv| tv.base_fingerprint() != fp) {
            return Err(Error::FingerprintMismatch {
                task_id: tv.task_id().to_string(),
                expected: fp,
                found: tv.base_fingerprint(),
            });
        }
    }
    Ok(order)
}

/// `base + alpha * Σ tvs`, float64-accumulated in ascending task-id order.
fn scaled_sum_onto(base: &Checkpoint, tvs: &[&TaskVector], alpha: f64) -> Result<Checkpoint> {
    let sums = weighted_sums(tvs, &vec![1.0; tvs.len()])?;
    let tensors = base
        .tensors()
        .iter()
        .zip(sums)
        .map(|(b, s)| {
            b.with_data(
                b.data()
                    .iter()
                    .zip(s)
                    .map(|(&x, u)| add_scaled(x, alpha, u))
                    .collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Checkpoint::new(tensors, BTreeMap::new())
}

fn masked_sum_merge(base: &Checkpoint, tvs: &[TaskVector], cfg: &MergeConfig) -> Result<Checkpoint> {
    let refs: Vec<&TaskVector> = tvs.iter().collect();
    check_family(base, &refs, cfg)?;
    let masked = tvs
        .par_iter()
        .map(|tv| {
            let seed = derive_seed(cfg.seed, &format!("merge/{}", tv.task_id()));
            apply_mask(tv, &build_mask(tv, &cfg.mask_spec, seed)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let masked_refs: Vec<&TaskVector> = masked.iter().collect();
    let merged = scaled_sum_onto(base, &masked_refs, cfg.alpha)?;
    Ok(stamp(merged, tvs, cfg))
}

/// Attaches provenance metadata to a merged checkpoint.
fn stamp(merged: Checkpoint, tvs: &[TaskVector], cfg: &MergeConfig) -> Checkpoint {
    let mut ids: Vec<&str> = tvs.iter().map(TaskVector::task_id).collect();
    ids.sort_unstable();
    let mut m = BTreeMap::new();
    m.insert("kind".to_string(), "merged".to_string());
    m.insert("method".to_string(), cfg.method.to_string());
    m.insert("alpha".to_string(), cfg.alpha.to_string());
    m.insert("seed".to_string(), cfg.seed.to_string());
    m.insert("task_ids".to_string(), ids.join(","));
    m.insert("tool_version".to_string(), TOOL_VERSION.to_string());
    match cfg.method {
        MergeMethod::Breadcrumbs | MergeMethod::RandomSparse => {
            m.insert("beta".to_string(), cfg.mask_spec.beta.to_string());
            m.insert("gamma".to_string(), cfg.mask_spec.gamma.to_string());
            m.insert("variant".to_string(), cfg.mask_spec.variant.to_string());
            m.insert("scope".to_string(), cfg.mask_spec.scope.to_string());
        }
        MergeMethod::Ties => {
            m.insert("ties_keep_fraction".to_string(), cfg.ties_keep_fraction.to_string());
        }
        MergeMethod::TaskArithmetic => {}
    }
    merged.with_metadata(m)
}

/// Name-keyed collection of merge strategies.
#[derive(Clone)]
pub struct MergeRegistry {
    strategies: BTreeMap<&'static str, Arc<dyn MergeStrategy>>,
}

impl MergeRegistry {
    pub fn empty() -> Self {
        MergeRegistry {
            strategies: BTreeMap::new(),
        }
    }

    /// Registry holding the four built-in methods.
    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(Breadcrumbs));
        r.register(Arc::new(TaskArithmetic));
        r.register(Arc::new(Ties));
        r.register(Arc::new(RandomSparse));
        r
    }

    /// Adds a strategy, replacing any previous one with the same name.
    pub fn register(&mut self, strategy: Arc<dyn MergeStrategy>) -> Option<Arc<dyn MergeStrategy>> {
        self.strategies.insert(strategy.name(), strategy)
    }

    pub fn get(&self, name: &str) -> Result<&dyn MergeStrategy> {
        self.strategies
            .get(name)
            .map(|s| s.as_ref())
            .ok_or_else(|| Error::UnknownMethod(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.strategies.keys().copied()
    }

    pub fn validate(&self, cfg: &MergeConfig) -> Result<()> {
        self.get(cfg.method.as_str())?.validate(cfg)
    }

    /// Dispatches on `cfg.method`.
    pub fn merge(&self, base: &Checkpoint, tvs: &[TaskVector], cfg: &MergeConfig) -> Result<Checkpoint> {
        self.get(cfg.method.as_str())?.merge(base, tvs, cfg)
    }
}

impl Default for MergeRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl fmt::Debug for MergeRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.strategies.keys()).finish()
    }
}

pub fn merge_breadcrumbs(base: &Checkpoint, tvs: &[TaskVector], cfg: &MergeConfig) -> Result<Checkpoint> {
    expect_method(cfg, MergeMethod::Breadcrumbs)?;
    Breadcrumbs.merge(base, tvs, cfg)
}

pub fn merge_task_arithmetic(base: &Checkpoint, tvs: &[TaskVector], cfg: &MergeConfig) -> Result<Checkpoint> {
    expect_method(cfg, MergeMethod::TaskArithmetic)?;
    TaskArithmetic.merge(base, tvs, cfg)
}

pub fn merge_random_sparse(base: &Checkpoint, tvs: &[TaskVector], cfg: &MergeConfig) -> Result<Checkpoint> {
    expect_method(cfg, MergeMethod::RandomSparse)?;
    RandomSparse.merge(base, tvs, cfg)
}

pub fn merge_ties(base: &Checkpoint, tvs: &[TaskVector], cfg: &MergeConfig) -> Result<Checkpoint> {
    expect_method(cfg, MergeMethod::Ties)?;
    Ties.merge(base, tvs, cfg)
}

fn expect_method(cfg: &MergeConfig, m: MergeMethod) -> Result<()> {
    if cfg.method != m {
        return Err(Error::InvalidConfig(format!(
            "config selects `{}` but `{m}` was invoked",
            cfg.method
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task_vectors::diff;
    use crate::tensor_store::TensorRecord;
    use rand::Rng;

    fn ckpt(vals: &[(&str, Vec<f32>)]) -> Checkpoint {
        Checkpoint::from_tensors(
            vals.iter()
                .map(|(n, v)| TensorRecord::new(*n, vec![v.len()], v.clone()).unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn family(seed: u64, tasks: usize) -> (Checkpoint, Vec<TaskVector>, Vec<Checkpoint>) {
        let mut rng = crate::seed::rng_for(seed, "merge-test");
        let shapes = [("a", 30usize), ("b", 7), ("c", 64)];
        let base = ckpt(
            &shapes
                .iter()
                .map(|&(n, s)| (n, (0..s).map(|_| rng.random_range(-1.0f32..1.0)).collect()))
                .collect::<Vec<_>>(),
        );
        let mut tvs = Vec::new();
        let mut fts = Vec::new();
        for t in 0..tasks {
            let ft = base
                .map_tensors(|x| x.data().iter().map(|v| v + rng.random_range(-0.2f32..0.2)).collect())
                .unwrap();
            tvs.push(diff(&base, &ft, &format!("task{t}")).unwrap());
            fts.push(ft);
        }
        (base, tvs, fts)
    }

    fn close(a: &Checkpoint, b: &Checkpoint) {
        for (x, y) in a.tensors().iter().zip(b.tensors()) {
            for (&u, &v) in x.data().iter().zip(y.data()) {
                assert!((u - v).abs() <= (1e-6 * v.abs()).max(1e-7), "{u} vs {v}");
            }
        }
    }

    #[test]
    fn single_task_reductions() {
        let (base, tvs, fts) = family(1, 1);
        let mut cfg = MergeConfig::breadcrumbs(1.0, 0.0, 1.0);
        cfg.mask_spec = MaskSpec::keep_all();
        close(&merge_breadcrumbs(&base, &tvs, &cfg).unwrap(), &fts[0]);
        close(&merge_ties(&base, &tvs, &MergeConfig::ties(1.0, 1.0)).unwrap(), &fts[0]);
    }

    #[test]
    fn degenerate_breadcrumbs_is_task_arithmetic() {
        let (base, tvs, _) = family(2, 3);
        let a = merge_breadcrumbs(&base, &tvs, &MergeConfig::breadcrumbs(0.4, 0.0, 1.0)).unwrap();
        let b = merge_task_arithmetic(&base, &tvs, &MergeConfig::task_arithmetic(0.4)).unwrap();
        assert_eq!(
            a.tensors().iter().map(|t| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>(),
            b.tensors().iter().map(|t| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>()
        );
        let r = merge_random_sparse(&base, &tvs, &MergeConfig::random_sparse(0.4, 0.0, 1.0, 3)).unwrap();
        assert_eq!(r.tensors(), b.tensors());
    }

    #[test]
    fn zero_alpha_and_cancellation_give_base() {
        let (base, tvs, _) = family(3, 2);
        let m = merge_task_arithmetic(&base, &tvs, &MergeConfig::task_arithmetic(0.0)).unwrap();
        assert!(Checkpoint::from_tensors(m.into_tensors()).unwrap().bitwise_eq(&base));
        let neg = TaskVector::new(
            "zzz",
            tvs[0].base_fingerprint(),
            tvs[0].deltas().map_tensors(|t| t.data().iter().map(|v| -v).collect()).unwrap(),
        );
        let m = merge_task_arithmetic(&base, &[tvs[0].clone(), neg], &MergeConfig::task_arithmetic(0.7)).unwrap();
        assert!(Checkpoint::from_tensors(m.into_tensors()).unwrap().bitwise_eq(&base));
    }

    #[test]
    fn ties_worked_positions() {
        let base = ckpt(&[("w", vec![0.0, 0.0])]);
        let fp = fingerprint(&base);
        let tv = |id: &str, v: Vec<f32>| TaskVector::new(id, fp, ckpt(&[("w", v)]));
        let tvs = vec![tv("a", vec![2.0, 2.0]), tv("b", vec![1.0, 1.0]), tv("c", vec![-4.0, -1.0])];
        let m = merge_ties(&base, &tvs, &MergeConfig::ties(1.0, 1.0)).unwrap();
        assert_eq!(m.get("w").unwrap().data(), &[-4.0, 1.5]);
    }

    #[test]
    fn ties_identical_vectors_average_to_themselves() {
        let (base, tvs, fts) = family(4, 1);
        let copies: Vec<TaskVector> = (0..3)
            .map(|i| TaskVector::new(format!("t{i}"), tvs[0].base_fingerprint(), tvs[0].deltas().clone()))
            .collect();
        close(&merge_ties(&base, &copies, &MergeConfig::ties(1.0, 1.0)).unwrap(), &fts[0]);
    }

    #[test]
    fn elect_rules() {
        assert_eq!(elect_disjoint_mean([2.0f32, 1.0, -4.0].into_iter()), -4.0);
        assert_eq!(elect_disjoint_mean([2.0f32, 1.0, -1.0].into_iter()), 1.5);
        assert_eq!(elect_disjoint_mean([1.0f32, -1.0].into_iter()), 1.0);
        assert_eq!(elect_disjoint_mean([0.0f32, 0.0].into_iter()), 0.0);
    }

    #[test]
    fn random_sparse_cardinality_matches_breadcrumbs() {
        let (_, tvs, _) = family(5, 2);
        let bc = MaskSpec::two_tailed(0.9, 0.99);
        let rs = bc.clone().with_variant(MaskVariant::Random);
        for tv in &tvs {
            let a = build_mask(tv, &bc, 0).unwrap();
            let b = build_mask(tv, &rs, 11).unwrap();
            assert_eq!(a.kept_counts(), b.kept_counts());
        }
    }

    #[test]
    fn random_sparse_is_seeded() {
        let (base, tvs, _) = family(6, 3);
        let cfg = MergeConfig::random_sparse(0.5, 0.5, 0.99, 17);
        let a = merge_random_sparse(&base, &tvs, &cfg).unwrap();
        let b = merge_random_sparse(&base, &tvs, &cfg).unwrap();
        assert!(a.bitwise_eq(&b));
        let mut other = cfg.clone();
        other.seed = 18;
        assert!(!merge_random_sparse(&base, &tvs, &other).unwrap().bitwise_eq(&a));
    }

    #[test]
    fn fingerprint_guard_and_override() {
        let (base, tvs, fts) = family(7, 2);
        let cfg = MergeConfig::breadcrumbs(0.5, 0.5, 0.99);
        assert!(matches!(
            merge_breadcrumbs(&fts[0], &tvs, &cfg),
            Err(Error::FingerprintMismatch { .. })
        ));
        let mut over = cfg.clone();
        over.allow_base_mismatch = true;
        assert!(merge_breadcrumbs(&fts[0], &tvs, &over).is_ok());
        assert!(merge_breadcrumbs(&base, &tvs, &cfg).is_ok());
    }

    #[test]
    fn invalid_configs() {
        let (base, tvs, _) = family(8, 2);
        assert!(merge_breadcrumbs(&base, &tvs, &MergeConfig::breadcrumbs(0.5, 0.95, 0.9)).is_err());
        assert!(merge_breadcrumbs(&base, &tvs, &MergeConfig::breadcrumbs(-1.0, 0.0, 1.0)).is_err());
        assert!(merge_ties(&base, &tvs, &MergeConfig::ties(1.0, 0.0)).is_err());
        assert!(merge_ties(&base, &tvs, &MergeConfig::task_arithmetic(1.0)).is_err());
        let mut rs = MergeConfig::random_sparse(0.5, 0.1, 0.9, 0);
        rs.mask_spec.variant = MaskVariant::TwoTailed;
        assert!(merge_random_sparse(&base, &tvs, &rs).is_err());
        assert!(matches!(
            merge_task_arithmetic(&base, &[], &MergeConfig::task_arithmetic(1.0)),
            Err(Error::EmptyTaskList)
        ));
    }

    #[test]
    fn registry_dispatch_and_metadata() {
        let (base, tvs, _) = family(9, 2);
        let reg = MergeRegistry::with_builtins();
        assert_eq!(
            reg.names().collect::<Vec<_>>(),
            vec!["breadcrumbs", "random_sparse", "task_arithmetic", "ties"]
        );
        let cfg = MergeConfig::breadcrumbs(0.3, 0.9, 0.99);
        let m = reg.merge(&base, &tvs, &cfg).unwrap();
        assert_eq!(m.metadata()["method"], "breadcrumbs");
        assert_eq!(m.metadata()["task_ids"], "task0,task1");
        assert_eq!(m.metadata()["beta"], "0.9");
        assert!(m.metadata()["tool_version"].starts_with("crumbs"));
        assert!(reg.get("fisher").is_err());
        assert_eq!("task-arithmetic".parse::<MergeMethod>().unwrap(), MergeMethod::TaskArithmetic);
    }

    #[test]
    fn permutation_invariance() {
        let (base, mut tvs, _) = family(10, 4);
        for method in MergeMethod::ALL {
            let cfg = match method {
                MergeMethod::Breadcrumbs => MergeConfig::breadcrumbs(0.3, 0.5, 0.95),
                MergeMethod::TaskArithmetic => MergeConfig::task_arithmetic(0.3),
                MergeMethod::Ties => MergeConfig::ties(0.3, 0.4),
                MergeMethod::RandomSparse => MergeConfig::random_sparse(0.3, 0.5, 0.95, 1),
            };
            let a = MergeRegistry::default().merge(&base, &tvs, &cfg).unwrap();
            tvs.reverse();
            let b = MergeRegistry::default().merge(&base, &tvs, &cfg).unwrap();
            assert!(a.bitwise_eq(&b), "{method}");
        }
    }
}
