//! Command implementations. Each resolves its arguments (expanding defaults),
//! validates them before touching the filesystem, does the work, then writes
//! outputs and a resolved recipe.

use std::path::{Path, PathBuf};

use crumbs::fixture_lab::{Family, FamilySpec, Split};
use crumbs::masking::{MaskSet, KIND_MASK};
use crumbs::merging::MergeConfig;
use crumbs::sweep::{SubsetScan, ValidationFreeRun};
use crumbs::task_vectors::KIND_KEY;
use crumbs::tensor_store::{self, Checkpoint};
use crumbs::{
    build_mask, cosine_matrix, sparsity_report, ErrorClass, EvalScope, GridSpec, Harness, MaskSpec, MaskVariant,
    MergeMethod, MergeRegistry, TaskVector,
};
use serde_json::json;

use crate::args::*;

#[derive(Debug)]
pub struct CliError {
    pub class: ErrorClass,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError { class: ErrorClass::Usage, message: message.into() }
    }

    pub fn exit_code(&self) -> u8 {
        match self.class {
            ErrorClass::Usage => 1,
            ErrorClass::Data => 2,
            ErrorClass::Runtime => 3,
        }
    }
}

impl From<crumbs::Error> for CliError {
    fn from(e: crumbs::Error) -> Self {
        CliError { class: e.class(), message: e.to_string() }
    }
}

type CliResult<T> = Result<T, CliError>;

/// Prefixes errors about a file's contents with the file's path.
fn in_file<T>(path: &Path, r: crumbs::Result<T>) -> CliResult<T> {
    r.map_err(|e| match e {
        crumbs::Error::Io { .. } => e.into(),
        other => CliError { class: other.class(), message: format!("{}: {other}", path.display()) },
    })
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    in_file(path, tensor_store::read_checkpoint(path))
}

fn load_vectors(paths: &[PathBuf]) -> CliResult<Vec<TaskVector>> {
    paths.iter().map(|p| in_file(p, TaskVector::load(p))).collect()
}

fn load_family(dir: &Path) -> CliResult<Family> {
    in_file(dir, Family::load(dir))
}

fn absolute(p: &Path) -> CliResult<PathBuf> {
    std::path::absolute(p).map_err(|e| CliError::usage(format!("cannot resolve path {}: {e}", p.display())))
}

fn absolute_all(ps: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    ps.iter().map(|p| absolute(p)).collect()
}

/// `<out>.recipe.toml` beside a single-file output.
fn sidecar(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".recipe.toml");
    PathBuf::from(s)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    Ok(tensor_store::write_bytes_atomic(path, text.as_bytes())?)
}

fn write_recipe(path: &Path, cmd: &Command) -> CliResult<()> {
    let text = toml::to_string(cmd)
        .map_err(|e| CliError { class: ErrorClass::Runtime, message: format!("cannot serialize recipe: {e}") })?;
    write_text(path, &text)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| crumbs::Error::Io { path: dir.to_path_buf(), source: e }.into())
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json values always serialize"));
}

fn default_variant(method: MergeMethod) -> MaskVariant {
    match method {
        MergeMethod::RandomSparse => MaskVariant::Random,
        MergeMethod::TaskArithmetic | MergeMethod::Ties => MaskVariant::None,
        MergeMethod::Breadcrumbs => MaskVariant::TwoTailed,
    }
}

fn mask_spec(flags: &MaskFlags, fallback: MaskVariant) -> MaskSpec {
    MaskSpec {
        exempt: flags.exempt.clone(),
        ..MaskSpec::two_tailed(flags.beta, flags.gamma)
            .with_variant(flags.variant.unwrap_or(fallback))
            .with_scope(flags.scope)
    }
}

fn merge_config(
    method: MergeMethod,
    alpha: f64,
    flags: &MaskFlags,
    keep_fraction: f64,
    seed: u64,
    allow_base_mismatch: bool,
) -> MergeConfig {
    let spec = match method {
        MergeMethod::TaskArithmetic | MergeMethod::Ties => MaskSpec::keep_all(),
        _ => mask_spec(flags, default_variant(method)),
    };
    MergeConfig {
        method,
        alpha,
        mask_spec: spec,
        ties_keep_fraction: keep_fraction,
        seed,
        allow_base_mismatch,
    }
}

pub fn run(cmd: Command, json: bool) -> CliResult<()> {
    match cmd {
        Command::Diff(a) => diff(a, json),
        Command::Merge(a) => merge(a, json),
        Command::Mask(a) => mask(a, json),
        Command::Cosine(a) => cosine(a, json),
        Command::Sweep(a) => sweep(a, json),
        Command::Subsets(a) => subsets(a, json),
        Command::Fixtures(a) => fixtures(a, json),
        Command::Inspect(a) => inspect(a, json),
        Command::Import(a) => convert(a, true, json),
        Command::Export(a) => convert(a, false, json),
        Command::Run(a) => {
            let text = std::fs::read_to_string(&a.recipe)
                .map_err(|e| CliError::from(crumbs::Error::Io { path: a.recipe.clone(), source: e }))?;
            let cmd: Command = toml::from_str(&text)
                .map_err(|e| CliError { class: ErrorClass::Data, message: format!("{}: {e}", a.recipe.display()) })?;
            run(cmd, json)
        }
    }
}

fn diff(mut a: DiffArgs, json: bool) -> CliResult<()> {
    let task_id = match &a.task_id {
        Some(t) if t.is_empty() => return Err(CliError::usage("--task-id must be non-empty")),
        Some(t) => t.clone(),
        None => a
            .finetuned
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .filter(|s| !s.is_empty())
            .ok_or_else(|| CliError::usage("cannot derive a task id from the fine-tuned path; pass --task-id"))?,
    };
    let base = load_checkpoint(&a.base)?;
    let ft = load_checkpoint(&a.finetuned)?;
    let tv = crumbs::diff(&base, &ft, &task_id)?;
    tv.save(&a.out)?;
    a.task_id = Some(task_id);
    a.base = absolute(&a.base)?;
    a.finetuned = absolute(&a.finetuned)?;
    a.out = absolute(&a.out)?;
    write_recipe(&sidecar(&a.out), &Command::Diff(a.clone()))?;
    let params = tv.deltas().num_params();
    let nonzero: usize = tv.deltas().tensors().iter().map(|t| t.data().iter().filter(|v| **v != 0.0).count()).sum();
    if json {
        print_json(&json!({
            "output": a.out,
            "task_id": tv.task_id(),
            "base_fingerprint": format!("{:016x}", tv.base_fingerprint()),
            "tensors": tv.deltas().len(),
            "params": params,
            "nonzero": nonzero,
        }));
    } else {
        println!("task vector `{}` -> {}", tv.task_id(), a.out.display());
        println!("  tensors   {}", tv.deltas().len());
        println!("  params    {params}");
        println!("  nonzero   {nonzero}");
        println!("  base      {:016x}", tv.base_fingerprint());
    }
    Ok(())
}

fn merge(mut a: MergeArgs, json: bool) -> CliResult<()> {
    let registry = MergeRegistry::with_builtins();
    let cfg = merge_config(a.method, a.alpha, &a.mask, a.keep_fraction, a.seed, a.allow_base_mismatch);
    registry.validate(&cfg)?;
    let base = load_checkpoint(&a.base)?;
    let tvs = load_vectors(&a.vectors)?;
    let merged = registry.merge(&base, &tvs, &cfg)?;
    tensor_store::write_checkpoint(&merged, &a.out)?;

    if !matches!(a.method, MergeMethod::TaskArithmetic | MergeMethod::Ties) {
        a.mask.variant = Some(cfg.mask_spec.variant);
    }
    a.base = absolute(&a.base)?;
    a.vectors = absolute_all(&a.vectors)?;
    a.out = absolute(&a.out)?;
    write_recipe(&sidecar(&a.out), &Command::Merge(a.clone()))?;
    if json {
        print_json(&json!({ "output": a.out, "config": cfg, "metadata": merged.metadata() }));
    } else {
        println!("{} -> {}", cfg.label(), a.out.display());
        println!("  tasks     {}", tvs.iter().map(TaskVector::task_id).collect::<Vec<_>>().join(", "));
        println!("  tensors   {}", merged.len());
        println!("  params    {}", merged.num_params());
    }
    Ok(())
}

fn mask(mut a: MaskArgs, json: bool) -> CliResult<()> {
    let spec = mask_spec(&a.mask, MaskVariant::TwoTailed);
    spec.validate()?;
    let tv = in_file(&a.vector, TaskVector::load(&a.vector))?;
    let ms = build_mask(&tv, &spec, a.seed)?;
    ms.save(&a.out)?;
    a.mask.variant = Some(spec.variant);
    a.vector = absolute(&a.vector)?;
    a.out = absolute(&a.out)?;
    write_recipe(&sidecar(&a.out), &Command::Mask(a.clone()))?;
    let report = sparsity_report(&ms);
    if json {
        print_json(&json!({ "output": a.out, "report": report }));
    } else {
        println!("mask for `{}` -> {}", tv.task_id(), a.out.display());
        print!("{report}");
    }
    Ok(())
}

fn cosine(mut a: CosineArgs, json: bool) -> CliResult<()> {
    let spec = mask_spec(&a.mask, MaskVariant::TwoTailed);
    if a.masked {
        spec.validate()?;
    }
    let tvs = load_vectors(&a.vectors)?;
    let m = cosine_matrix(&tvs, a.masked.then_some((&spec, a.seed)))?;
    if let Some(out) = &a.out {
        write_text(out, &m.to_csv()?)?;
        a.mask.variant = Some(spec.variant);
        a.vectors = absolute_all(&a.vectors)?;
        let out = absolute(out)?;
        a.out = Some(out.clone());
        write_recipe(&sidecar(&out), &Command::Cosine(a.clone()))?;
    }
    if json {
        print_json(&json!({
            "task_ids": m.task_ids,
            "values": m.values,
            "mean_abs_off_diagonal": m.mean_abs_off_diagonal(),
        }));
    } else {
        println!("{m}");
        match m.mean_abs_off_diagonal() {
            Some(v) => println!("mean |off-diagonal| = {v:.6}"),
            None => println!("mean |off-diagonal| = undefined"),
        }
    }
    Ok(())
}

fn grid_from(method: MergeMethod, g: &GridFlags, seed: u64) -> GridSpec {
    let mut grid = GridSpec::default_for(method);
    if let Some(v) = &g.alphas {
        grid.alphas = v.clone();
    }
    if let Some(v) = &g.betas {
        grid.betas = v.clone();
    }
    if let Some(v) = &g.gammas {
        grid.gammas = v.clone();
    }
    if let Some(v) = &g.keep_fractions {
        grid.keep_fractions = v.clone();
    }
    if let Some(v) = g.variant {
        grid.variant = v;
    }
    grid.scope = g.scope;
    grid.seed = seed;
    grid
}

fn other_split(s: Split) -> Split {
    match s {
        Split::Test => Split::Val,
        _ => Split::Test,
    }
}

fn validation_free_csv(run: &ValidationFreeRun) -> CliResult<String> {
    let mut out = String::from("n,average_normalized_accuracy,average_accuracy\n");
    for (n, r) in &run.reports {
        out.push_str(&format!("{n},{},{}\n", r.average_normalized_accuracy, r.average_accuracy));
    }
    Ok(out)
}

fn sweep(mut a: SweepArgs, json: bool) -> CliResult<()> {
    let grid = grid_from(a.method, &a.grid, a.seed);
    let registry = MergeRegistry::with_builtins();
    for c in grid.expand()? {
        registry.validate(&c)?;
    }
    if a.k == Some(0) {
        return Err(CliError::usage("--k must be at least 1"));
    }
    let family = load_family(&a.family)?;
    if let Some(k) = a.k {
        if k > family.tasks.len() {
            return Err(CliError::usage(format!("--k {k} exceeds the family's {} tasks", family.tasks.len())));
        }
    }
    let tune_eval = family.evaluator(a.split);
    let held_eval = family.evaluator(other_split(a.split));
    let harness = Harness::new(&registry, &tune_eval, &family.base);
    let held = Harness::new(&registry, &held_eval, &family.base);
    let tvs = &family.task_vectors;
    let ids = family.task_ids();

    let result = harness.grid_search(tvs, &grid)?;
    let best = result.best_entry();
    let held_report = held.run(tvs, &best.config, &ids)?;
    let vf = a.k.map(|k| harness.validation_free_run(tvs, k, &grid)).transpose()?;

    create_dir(&a.out_dir)?;
    write_text(&a.out_dir.join("sweep.csv"), &result.to_csv()?)?;
    write_text(&a.out_dir.join("sweep.json"), &result.to_json()?)?;
    let best_json = json!({
        "config": best.config,
        "tuning_split": a.split,
        "tuning_report": best.report,
        "held_out_split": other_split(a.split),
        "held_out_report": held_report,
    });
    write_text(&a.out_dir.join("best.json"), &serde_json::to_string_pretty(&best_json).unwrap())?;
    if let Some(run) = &vf {
        write_text(&a.out_dir.join("validation_free.csv"), &validation_free_csv(run)?)?;
        write_text(
            &a.out_dir.join("validation_free.json"),
            &serde_json::to_string_pretty(run).map_err(|e| crumbs::Error::Report(e.to_string()))?,
        )?;
    }

    a.grid.alphas = Some(grid.alphas.clone());
    a.grid.betas = Some(grid.betas.clone());
    a.grid.gammas = Some(grid.gammas.clone());
    a.grid.keep_fractions = Some(grid.keep_fractions.clone());
    a.grid.variant = Some(grid.variant);
    a.family = absolute(&a.family)?;
    a.out_dir = absolute(&a.out_dir)?;
    write_recipe(&a.out_dir.join("recipe.toml"), &Command::Sweep(a.clone()))?;

    if json {
        print_json(&json!({
            "cells": result.entries.len(),
            "best": best_json,
            "validation_free": vf.as_ref().map(|r| r.reports.iter().map(|(n, rep)| json!({"n": n, "average_normalized_accuracy": rep.average_normalized_accuracy})).collect::<Vec<_>>()),
        }));
    } else {
        println!("{} cells searched on the {} split", result.entries.len(), a.split);
        println!("best: {}", best.config.label());
        println!("  {} avg normalized accuracy {:.4}", a.split, best.report.average_normalized_accuracy);
        println!("  {} avg normalized accuracy {:.4}", other_split(a.split), held_report.average_normalized_accuracy);
        if let Some(run) = &vf {
            println!("validation-free (tuned on {} tasks, frozen at {}):", run.k, run.frozen.label());
            for (n, r) in &run.reports {
                println!("  n={n:<3} {:.4}", r.average_normalized_accuracy);
            }
        }
        println!("outputs in {}", a.out_dir.display());
    }
    Ok(())
}

fn subsets(mut a: SubsetsArgs, json: bool) -> CliResult<()> {
    let registry = MergeRegistry::with_builtins();
    let grid = GridSpec { seed: a.seed, ..GridSpec::default_for(a.method) };
    let fixed = match (a.tune, a.alpha) {
        (Some(_), _) => None,
        (None, Some(alpha)) => {
            let cfg = merge_config(a.method, alpha, &a.mask, a.keep_fraction, a.seed, false);
            registry.validate(&cfg)?;
            Some(cfg)
        }
        (None, None) => return Err(CliError::usage("pass --alpha for a fixed-config scan, or --tune")),
    };
    let family = load_family(&a.family)?;
    let eval = family.evaluator(a.split);
    let harness = Harness::new(&registry, &eval, &family.base);
    let scan: SubsetScan = match (&fixed, a.tune) {
        (Some(cfg), _) => harness.subset_scan(&family.task_vectors, cfg, a.eval_scope)?,
        (None, Some(t)) => harness.tuned_subset_scan(&family.task_vectors, &grid, a.eval_scope, t)?,
        (None, None) => unreachable!("rejected above"),
    };
    create_dir(&a.out_dir)?;
    write_text(&a.out_dir.join("subsets.csv"), &scan.entries_csv()?)?;
    write_text(&a.out_dir.join("size_means.csv"), &scan.size_means_csv()?)?;
    write_text(&a.out_dir.join("subsets.json"), &scan.to_json()?)?;
    if fixed.is_some() && !matches!(a.method, MergeMethod::TaskArithmetic | MergeMethod::Ties) {
        a.mask.variant = Some(a.mask.variant.unwrap_or(default_variant(a.method)));
    }
    a.family = absolute(&a.family)?;
    a.out_dir = absolute(&a.out_dir)?;
    write_recipe(&a.out_dir.join("recipe.toml"), &Command::Subsets(a.clone()))?;
    if json {
        print_json(&json!({ "subsets": scan.entries.len(), "size_means": scan.size_means }));
    } else {
        println!(
            "{} subsets merged, scored on {} tasks",
            scan.entries.len(),
            if a.eval_scope == EvalScope::AllTasks { "all" } else { "the merged" }
        );
        println!("{:>4}  {:>8}  {:>10}", "size", "subsets", "mean norm");
        for m in &scan.size_means {
            println!("{:>4}  {:>8}  {:>10.4}", m.size, m.subsets, m.mean_normalized_accuracy);
        }
        println!("outputs in {}", a.out_dir.display());
    }
    Ok(())
}

fn fixtures(mut a: FixturesArgs, json: bool) -> CliResult<()> {
    let spec = match a.family.take() {
        Some(s) => s,
        None => FamilySpec { num_tasks: a.tasks, ..FamilySpec::default_with_seed(a.seed) },
    };
    spec.validate()?;
    if spec.num_tasks > crumbs::sweep::MAX_SUBSET_TASKS {
        eprintln!(
            "note: {} tasks exceeds the subset-scan limit of {}",
            spec.num_tasks,
            crumbs::sweep::MAX_SUBSET_TASKS
        );
    }
    let family = Family::build(&spec)?;
    family.save(&a.out_dir)?;
    a.seed = spec.seed;
    a.tasks = spec.num_tasks;
    a.family = Some(spec);
    a.out_dir = absolute(&a.out_dir)?;
    write_recipe(&a.out_dir.join("recipe.toml"), &Command::Fixtures(a.clone()))?;
    let failing = family.sanity_failures();
    if json {
        print_json(&json!({
            "out_dir": a.out_dir,
            "params": family.base.num_params(),
            "accuracies": family.accuracies,
            "sanity_failures": failing,
        }));
    } else {
        println!("family of {} tasks, {} params each -> {}", family.tasks.len(), family.base.num_params(), a.out_dir.display());
        println!("{:<8}  {:>9}  {:>9}", "task", "base test", "ft test");
        for (id, acc) in &family.accuracies {
            println!("{id:<8}  {:>9.4}  {:>9.4}", acc.base_test, acc.finetuned_test);
        }
        if !failing.is_empty() {
            println!("warning: fine-tunes below base accuracy: {}", failing.join(", "));
        }
    }
    Ok(())
}

fn inspect(a: InspectArgs, json: bool) -> CliResult<()> {
    let ckpt = load_checkpoint(&a.file)?;
    let is_mask = ckpt.metadata().get(KIND_KEY).map(String::as_str) == Some(KIND_MASK);
    let kept: Option<MaskSet> = if is_mask { Some(in_file(&a.file, MaskSet::from_checkpoint(&ckpt))?) } else { None };
    let rows: Vec<(String, Vec<usize>, usize, Option<f64>)> = ckpt
        .tensors()
        .iter()
        .map(|t| {
            let frac = kept.as_ref().and_then(|ms| ms.get(t.name())).and_then(|m| {
                (m.size() > 0).then(|| m.kept as f64 / m.size() as f64)
            });
            (t.name().to_string(), t.shape().to_vec(), t.numel(), frac)
        })
        .collect();
    if json {
        print_json(&json!({
            "file": a.file,
            "metadata": ckpt.metadata(),
            "params": ckpt.num_params(),
            "tensors": rows.iter().map(|(n, s, k, f)| json!({"name": n, "shape": s, "numel": k, "kept_fraction": f})).collect::<Vec<_>>(),
            "total_kept_fraction": kept.as_ref().map(MaskSet::total_kept_fraction),
        }));
        return Ok(());
    }
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(4).max(4);
    let shapes: Vec<String> = rows.iter().map(|r| format!("{:?}", r.1)).collect();
    let swidth = shapes.iter().map(String::len).max().unwrap_or(5).max(5);
    print!("{:<width$}  {:<swidth$}  {:>10}", "name", "shape", "numel");
    if is_mask {
        print!("  {:>8}", "kept%");
    }
    println!();
    for (r, s) in rows.iter().zip(&shapes) {
        print!("{:<width$}  {:<swidth$}  {:>10}", r.0, s, r.2);
        if is_mask {
            match r.3 {
                Some(f) => print!("  {:>8.2}", 100.0 * f),
                None => print!("  {:>8}", "n/a"),
            }
        }
        println!();
    }
    println!("{} tensors, {} params", ckpt.len(), ckpt.num_params());
    if let Some(ms) = &kept {
        println!("total kept {:.2}%", 100.0 * ms.total_kept_fraction());
    }
    for (k, v) in ckpt.metadata() {
        println!("  {k} = {v}");
    }
    Ok(())
}

fn convert(mut a: ConvertArgs, import: bool, json: bool) -> CliResult<()> {
    let ckpt = if import {
        let c = in_file(&a.input, tensor_store::import_safetensors(&a.input))?;
        tensor_store::write_checkpoint(&c, &a.out)?;
        c
    } else {
        let c = load_checkpoint(&a.input)?;
        tensor_store::export_safetensors(&c, &a.out)?;
        c
    };
    a.input = absolute(&a.input)?;
    a.out = absolute(&a.out)?;
    let cmd = if import { Command::Import(a.clone()) } else { Command::Export(a.clone()) };
    write_recipe(&sidecar(&a.out), &cmd)?;
    if json {
        print_json(&json!({ "output": a.out, "tensors": ckpt.len(), "params": ckpt.num_params() }));
    } else {
        println!("{} tensors ({} params) -> {}", ckpt.len(), ckpt.num_params(), a.out.display());
    }
    Ok(())
}
