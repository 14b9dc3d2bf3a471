//! Magnitude masks over task vectors.
//!
//! Elements are ranked ascending by `|value|` (ties by ascending flat index).
//! With `b = floor(beta * N)` and `t = floor((1 - gamma) * N)`, ranks `[0, b)`
//! and `[N - t, N)` are dropped and the middle band is kept.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::task_vectors::{TaskVector, KIND_KEY};
use crate::tensor_store::{self, assert_compatible, Checkpoint, TensorRecord};

pub const KIND_MASK: &str = "mask";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskScope {
    PerLayer,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskVariant {
    TwoTailed,
    BottomOnly,
    TopOnly,
    None,
    Random,
}

macro_rules! str_enum {
    ($ty:ty { $($variant:path => $s:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($variant => $s),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($variant),)+
                    other => Err(Error::InvalidConfig(format!(
                        "unknown {} `{other}`", stringify!($ty)
                    ))),
                }
            }
        }
    };
}

str_enum!(MaskScope {
    MaskScope::PerLayer => "per_layer",
    MaskScope::Global => "global",
});

str_enum!(MaskVariant {
    MaskVariant::TwoTailed => "two_tailed",
    MaskVariant::BottomOnly => "bottom_only",
    MaskVariant::TopOnly => "top_only",
    MaskVariant::None => "none",
    MaskVariant::Random => "random",
});

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    /// Fraction of smallest-magnitude entries dropped.
    pub beta: f64,
    /// Rank quantile above which entries are dropped; the top `1 - gamma`
    /// fraction goes.
    pub gamma: f64,
    pub scope: MaskScope,
    pub variant: MaskVariant,
    /// Tensors whose name starts with any of these prefixes are kept whole.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exempt: Vec<String>,
}

impl MaskSpec {
    pub fn two_tailed(beta: f64, gamma: f64) -> Self {
        MaskSpec {
            beta,
            gamma,
            scope: MaskScope::PerLayer,
            variant: MaskVariant::TwoTailed,
            exempt: Vec::new(),
        }
    }

    pub fn keep_all() -> Self {
        MaskSpec {
            variant: MaskVariant::None,
            ..Self::two_tailed(0.0, 1.0)
        }
    }

    pub fn with_variant(mut self, variant: MaskVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_scope(mut self, scope: MaskScope) -> Self {
        self.scope = scope;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (b, g) = (self.beta, self.gamma);
        if !(b.is_finite() && g.is_finite()) || !(0.0..=1.0).contains(&b) || !(0.0..=1.0).contains(&g) {
            return Err(Error::InvalidConfig(format!(
                "beta and gamma must lie in [0, 1] (beta={b}, gamma={g})"
            )));
        }
        if b > g {
            return Err(Error::InvalidConfig(format!(
                "constraint beta <= gamma violated (beta={b}, gamma={g})"
            )));
        }
        Ok(())
    }

    /// Dropped counts `(bottom, top)` for a population of `n` entries.
    pub fn tail_counts(&self, n: usize) -> (usize, usize) {
        let bottom = floor_fraction(self.beta, n);
        let top = floor_fraction(1.0 - self.gamma, n);
        let (bottom, top) = match self.variant {
            MaskVariant::TwoTailed | MaskVariant::Random => (bottom, top),
            MaskVariant::BottomOnly => (bottom, 0),
            MaskVariant::TopOnly => (0, top),
            MaskVariant::None => (0, 0),
        };
        let bottom = bottom.min(n);
        (bottom, top.min(n - bottom))
    }

    pub fn kept_count(&self, n: usize) -> usize {
        let (b, t) = self.tail_counts(n);
        n - b - t
    }

    fn is_exempt(&self, name: &str) -> bool {
        self.exempt.iter().any(|p| name.starts_with(p.as_str()))
    }
}

/// `floor(q * n)`, snapping products within float noise of an integer to
/// that integer so that e.g. `(1 - 5/6) * 6` counts as 1.
pub fn floor_fraction(q: f64, n: usize) -> usize {
    let x = q * n as f64;
    if x <= 0.0 {
        return 0;
    }
    let nearest = x.round();
    let snapped = if (x - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest
    } else {
        x.floor()
    };
    (snapped as usize).min(n)
}

/// Indices ordered ascending by `|value|`, ties by index.
pub fn magnitude_order(values: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    // stable sort keeps index order among equal magnitudes
    idx.sort_by(|&a, &b| values[a].abs().total_cmp(&values[b].abs()));
    idx
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorMask {
    pub name: String,
    pub shape: Vec<usize>,
    /// `true` = keep.
    pub keep: Vec<bool>,
    pub kept: usize,
}

impl TensorMask {
    fn from_keep(name: &str, shape: &[usize], keep: Vec<bool>) -> Self {
        let kept = keep.iter().filter(|&&k| k).count();
        TensorMask {
            name: name.to_string(),
            shape: shape.to_vec(),
            keep,
            kept,
        }
    }

    pub fn size(&self) -> usize {
        self.keep.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    masks: Vec<TensorMask>,
    metadata: BTreeMap<String, String>,
}

impl MaskSet {
    pub fn new(masks: Vec<TensorMask>) -> Self {
        MaskSet {
            masks,
            metadata: BTreeMap::new(),
        }
    }

    pub fn masks(&self) -> &[TensorMask] {
        &self.masks
    }

    pub fn get(&self, name: &str) -> Option<&TensorMask> {
        self.masks.iter().find(|m| m.name == name)
    }

    pub fn kept_counts(&self) -> Vec<usize> {
        self.masks.iter().map(|m| m.kept).collect()
    }

    pub fn total_kept(&self) -> usize {
        self.masks.iter().map(|m| m.kept).sum()
    }

    pub fn total_size(&self) -> usize {
        self.masks.iter().map(TensorMask::size).sum()
    }

    /// `Σ kept / Σ size`; vacuously 1 for a mask over no elements.
    pub fn total_kept_fraction(&self) -> f64 {
        match self.total_size() {
            0 => 1.0,
            n => self.total_kept() as f64 / n as f64,
        }
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    /// Masks as float32 0/1 tensors.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let tensors = self
            .masks
            .iter()
            .map(|m| {
                let data = m.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
                TensorRecord::new(m.name.clone(), m.shape.clone(), data)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut meta = self.metadata.clone();
        meta.insert(KIND_KEY.to_string(), KIND_MASK.to_string());
        Checkpoint::new(tensors, meta)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.metadata().get(KIND_KEY).map(String::as_str) != Some(KIND_MASK) {
            return Err(Error::Metadata(format!("expected {KIND_KEY}={KIND_MASK}")));
        }
        let masks = ckpt
            .tensors()
            .iter()
            .map(|t| {
                let keep = t
                    .data()
                    .iter()
                    .map(|&v| match v {
                        x if x == 1.0 => Ok(true),
                        x if x == 0.0 => Ok(false),
                        x => Err(Error::InvalidTensor {
                            name: t.name().to_string(),
                            reason: format!("mask value {x} is neither 0 nor 1"),
                        }),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(TensorMask::from_keep(t.name(), t.shape(), keep))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MaskSet {
            masks,
            metadata: ckpt.metadata().clone(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        tensor_store::write_checkpoint(&self.to_checkpoint()?, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&tensor_store::read_checkpoint(path)?)
    }
}

fn band_keep(order: &[usize], bottom: usize, top: usize) -> Vec<bool> {
    let n = order.len();
    let mut keep = vec![false; n];
    for &i in &order[bottom..n - top] {
        keep[i] = true;
    }
    keep
}

/// Builds one mask per tensor of `tv`. `seed` only matters for the random
/// variant.
pub fn build_mask(tv: &TaskVector, spec: &MaskSpec, seed: u64) -> Result<MaskSet> {
    spec.validate()?;
    let tensors = tv.deltas().tensors();
    let mut masks = match spec.scope {
        MaskScope::PerLayer => tensors
            .par_iter()
            .map(|t| {
                let n = t.numel();
                let keep = if spec.is_exempt(t.name()) {
                    vec![true; n]
                } else if spec.variant == MaskVariant::Random {
                    let k = spec.kept_count(n);
                    let mut rng = rng_for(seed, &format!("mask/random/{}", t.name()));
                    let mut keep = vec![false; n];
                    for i in sample(&mut rng, n, k) {
                        keep[i] = true;
                    }
                    keep
                } else {
                    let (b, top) = spec.tail_counts(n);
                    band_keep(&magnitude_order(t.data()), b, top)
                };
                TensorMask::from_keep(t.name(), t.shape(), keep)
            })
            .collect::<Vec<_>>(),
        MaskScope::Global => global_masks(tensors, spec, seed),
    };
    masks.sort_by(|a, b| a.name.cmp(&b.name));

    let mut set = MaskSet::new(masks);
    let m = &mut set.metadata;
    m.insert("beta".into(), spec.beta.to_string());
    m.insert("gamma".into(), spec.gamma.to_string());
    m.insert("variant".into(), spec.variant.to_string());
    m.insert("scope".into(), spec.scope.to_string());
    m.insert("seed".into(), seed.to_string());
    m.insert("task_id".into(), tv.task_id().to_string());
    if !spec.exempt.is_empty() {
        m.insert("exempt".into(), spec.exempt.join(","));
    }
    Ok(set)
}

/// Ranks every non-exempt element of every tensor jointly, in name order
/// then flat index for ties.
fn global_masks(tensors: &[TensorRecord], spec: &MaskSpec, seed: u64) -> Vec<TensorMask> {
    let ranked: Vec<&TensorRecord> = tensors.iter().filter(|t| !spec.is_exempt(t.name())).collect();
    let flat: Vec<f32> = ranked.iter().flat_map(|t| t.data().iter().copied()).collect();
    let n = flat.len();
    let keep_flat = if spec.variant == MaskVariant::Random {
        let mut keep = vec![false; n];
        let mut rng = rng_for(seed, "mask/random/__global__");
        for i in sample(&mut rng, n, spec.kept_count(n)) {
            keep[i] = true;
        }
        keep
    } else {
        let (b, t) = spec.tail_counts(n);
        band_keep(&magnitude_order(&flat), b, t)
    };

    let mut offset = 0;
    let mut out = Vec::with_capacity(tensors.len());
    for t in tensors {
        let keep = if spec.is_exempt(t.name()) {
            vec![true; t.numel()]
        } else {
            let k = keep_flat[offset..offset + t.numel()].to_vec();
            offset += t.numel();
            k
        };
        out.push(TensorMask::from_keep(t.name(), t.shape(), keep));
    }
    out
}

/// Zeroes masked entries; kept entries are copied bit for bit.
pub fn apply_mask(tv: &TaskVector, ms: &MaskSet) -> Result<TaskVector> {
    let tensors = tv.deltas().tensors();
    if tensors.len() != ms.masks.len() {
        return Err(Error::LengthMismatch {
            what: "tensors in task vector vs mask set",
            left: tensors.len(),
            right: ms.masks.len(),
        });
    }
    let masked = tensors
        .iter()
        .zip(&ms.masks)
        .map(|(t, m)| {
            if t.name() != m.name {
                return Err(Error::MissingTensor {
                    name: t.name().to_string(),
                    present_in: "task vector",
                    missing_from: "mask set",
                });
            }
            if t.shape() != m.shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    name: t.name().to_string(),
                    left: t.shape().to_vec(),
                    right: m.shape.clone(),
                });
            }
            let data = t
                .data()
                .iter()
                .zip(&m.keep)
                .map(|(&v, &k)| if k { v } else { 0.0 })
                .collect();
            t.with_data(data)
        })
        .collect::<Result<Vec<_>>>()?;
    let deltas = Checkpoint::from_tensors(masked)?;
    assert_compatible(tv.deltas(), &deltas)?;
    tv.with_deltas(deltas)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorSparsity {
    pub name: String,
    pub size: usize,
    pub kept: usize,
    /// `None` for empty tensors.
    pub kept_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparsityReport {
    pub per_tensor: Vec<TensorSparsity>,
    pub total_kept_fraction: f64,
    /// `1 - total_kept_fraction`.
    pub masked_fraction: f64,
}

pub fn sparsity_report(ms: &MaskSet) -> SparsityReport {
    let per_tensor = ms
        .masks
        .iter()
        .map(|m| TensorSparsity {
            name: m.name.clone(),
            size: m.size(),
            kept: m.kept,
            kept_fraction: (m.size() > 0).then(|| m.kept as f64 / m.size() as f64),
        })
        .collect();
    let total = ms.total_kept_fraction();
    SparsityReport {
        per_tensor,
        total_kept_fraction: total,
        masked_fraction: 1.0 - total,
    }
}

impl fmt::Display for SparsityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.per_tensor.iter().map(|t| t.name.len()).max().unwrap_or(6).max(6);
        writeln!(f, "{:<width$}  {:>10}  {:>10}  {:>8}", "tensor", "size", "kept", "kept%")?;
        for t in &self.per_tensor {
            let frac = match t.kept_fraction {
                Some(x) => format!("{:.4}", x),
                None => "n/a".into(),
            };
            writeln!(f, "{:<width$}  {:>10}  {:>10}  {:>8}", t.name, t.size, t.kept, frac)?;
        }
        write!(
            f,
            "total kept {:.6}, masked {:.6}",
            self.total_kept_fraction, self.masked_fraction
        )
    }
}
