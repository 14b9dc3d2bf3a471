//! End-to-end checks across the store, task vectors, masks, merging and the
//! fixture harness.

use std::collections::BTreeMap;
use std::sync::Arc;

use crumbs::fixture_lab::{Family, FamilySpec, Split};
use crumbs::{
    apply, build_mask, diff, read_checkpoint, write_checkpoint, Checkpoint, EvalScope, GridSpec, Harness,
    MaskSpec, MergeConfig, MergeMethod, MergeRegistry, MergeStrategy, Result, TaskVector, TensorRecord,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_checkpoint(rng: &mut ChaCha8Rng, shapes: &[(String, Vec<usize>)]) -> Checkpoint {
    let tensors = shapes
        .iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            TensorRecord::new(name.clone(), shape.clone(), data).unwrap()
        })
        .collect();
    Checkpoint::from_tensors(tensors).unwrap()
}

fn layout(count: usize) -> Vec<(String, Vec<usize>)> {
    (0..count)
        .map(|i| match i % 3 {
            0 => (format!("block.{i}.weight"), vec![3 + i % 5, 4]),
            1 => (format!("block.{i}.bias"), vec![7]),
            _ => (format!("block.{i}.scale"), vec![]),
        })
        .collect()
}

#[test]
fn fifty_tensor_checkpoint_survives_disk_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut meta = BTreeMap::new();
    meta.insert("origin".to_string(), "integration".to_string());
    let ckpt = random_checkpoint(&mut rng, &layout(50)).with_metadata(meta);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.mbc");
    write_checkpoint(&ckpt, &path).unwrap();
    let back = read_checkpoint(&path).unwrap();
    assert!(ckpt.bitwise_eq(&back));
    assert_eq!(back.metadata().get("origin").map(String::as_str), Some("integration"));
    assert_eq!(back.len(), 50);
}

#[test]
fn diff_then_apply_at_one_recovers_finetuned_within_rounding() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let shapes = layout(9);
    let base = random_checkpoint(&mut rng, &shapes);
    let ft = random_checkpoint(&mut rng, &shapes);
    let tv = diff(&base, &ft, "t").unwrap();
    let back = apply(&base, &tv, 1.0).unwrap();
    for (a, b) in back.tensors().iter().zip(ft.tensors()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
        }
    }
}

#[test]
fn task_vector_and_mask_files_reload_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let shapes = layout(6);
    let base = random_checkpoint(&mut rng, &shapes);
    let ft = random_checkpoint(&mut rng, &shapes);
    let tv = diff(&base, &ft, "alpha").unwrap();
    let mask = build_mask(&tv, &MaskSpec::two_tailed(0.5, 0.9), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    tv.save(dir.path().join("alpha.mbc")).unwrap();
    mask.save(dir.path().join("alpha.mask.mbc")).unwrap();
    let tv2 = TaskVector::load(dir.path().join("alpha.mbc")).unwrap();
    let mask2 = crumbs::MaskSet::load(dir.path().join("alpha.mask.mbc")).unwrap();
    assert_eq!(tv2.task_id(), "alpha");
    assert_eq!(tv2.base_fingerprint(), tv.base_fingerprint());
    assert!(tv2.deltas().bitwise_eq(tv.deltas()));
    assert_eq!(mask2.kept_counts(), mask.kept_counts());
}

/// Averages the task vectors with no scaling; exercises the registry's
/// extension point.
struct Average;

impl MergeStrategy for Average {
    fn name(&self) -> &'static str {
        "task_arithmetic"
    }

    fn validate(&self, _cfg: &MergeConfig) -> Result<()> {
        Ok(())
    }

    fn merge(&self, base: &Checkpoint, tvs: &[TaskVector], _cfg: &MergeConfig) -> Result<Checkpoint> {
        let w = vec![1.0 / tvs.len() as f64; tvs.len()];
        let combined = crumbs::linear_combine(tvs, &w)?;
        apply(base, &combined, 1.0)
    }
}

#[test]
fn registered_strategy_replaces_builtin_of_same_name() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let shapes = layout(4);
    let base = random_checkpoint(&mut rng, &shapes);
    let tvs: Vec<TaskVector> = (0..3)
        .map(|i| diff(&base, &random_checkpoint(&mut rng, &shapes), &format!("t{i}")).unwrap())
        .collect();
    let mut reg = MergeRegistry::with_builtins();
    let cfg = MergeConfig::task_arithmetic(1.0 / 3.0);
    let builtin = reg.merge(&base, &tvs, &cfg).unwrap();
    assert!(reg.register(Arc::new(Average)).is_some());
    let custom = reg.merge(&base, &tvs, &cfg).unwrap();
    for (a, b) in builtin.tensors().iter().zip(custom.tensors()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-6);
        }
    }
    assert_eq!(reg.names().count(), 4);
}

#[test]
fn every_builtin_rejects_an_empty_vector_list() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let base = random_checkpoint(&mut rng, &layout(2));
    let reg = MergeRegistry::with_builtins();
    for cfg in [
        MergeConfig::breadcrumbs(0.3, 0.5, 0.9),
        MergeConfig::task_arithmetic(0.3),
        MergeConfig::ties(0.3, 0.2),
        MergeConfig::random_sparse(0.3, 0.5, 0.9, 0),
    ] {
        assert!(reg.merge(&base, &[], &cfg).is_err(), "{}", cfg.label());
    }
}

fn small_family(seed: u64) -> FamilySpec {
    let mut spec = FamilySpec::default_with_seed(seed);
    spec.num_tasks = 3;
    spec.input_dim = 8;
    spec.active_dims = 8;
    spec.base_train_size = 300;
    spec.train_size = 120;
    spec.val_size = 150;
    spec.test_size = 150;
    spec.pretrain.hidden_dims = vec![12];
    spec.finetune.hidden_dims = vec![12];
    spec.finetune.epochs = 5;
    spec
}

#[test]
fn fixture_pipeline_is_deterministic_and_survives_reload() {
    let spec = small_family(9);
    let a = Family::build(&spec).unwrap();
    let b = Family::build(&spec).unwrap();
    assert!(a.base.bitwise_eq(&b.base));
    for (x, y) in a.finetuned.iter().zip(&b.finetuned) {
        assert!(x.bitwise_eq(y));
    }

    let dir = tempfile::tempdir().unwrap();
    a.save(dir.path()).unwrap();
    let loaded = Family::load(dir.path()).unwrap();

    let reg = MergeRegistry::with_builtins();
    let grid = GridSpec::default_for(MergeMethod::Breadcrumbs);
    let run = |f: &Family| {
        let eval = f.evaluator(Split::Val);
        let h = Harness::new(&reg, &eval, &f.base);
        h.grid_search(&f.task_vectors, &grid).unwrap()
    };
    let r1 = run(&a);
    let r2 = run(&loaded);
    assert_eq!(r1.best, r2.best);
    for (e1, e2) in r1.entries.iter().zip(&r2.entries) {
        assert_eq!(e1.config, e2.config);
        assert_eq!(e1.report, e2.report);
    }

    let eval = loaded.evaluator(Split::Test);
    let h = Harness::new(&reg, &eval, &loaded.base);
    let scan = h
        .subset_scan(&loaded.task_vectors, &r1.best_entry().config, EvalScope::ObservedOnly)
        .unwrap();
    assert_eq!(scan.entries.len(), 7);
    assert_eq!(scan.size_means.iter().map(|s| s.subsets).collect::<Vec<_>>(), vec![3, 3, 1]);
}
