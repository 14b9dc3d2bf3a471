//! Merging fine-tuned models through sparse task vectors.
//!
//! A task vector is the element-wise difference between a fine-tuned model
//! and the base it started from. Breadcrumbs masks both tails of every task
//! vector's magnitude distribution (the many tiny deltas and the few outliers)
//! before summing them back onto the base. Task arithmetic, TIES and a
//! random-sparse control are available as baselines, along with a sweep
//! harness and a self-contained fixture lab that trains small model families
//! to run the experiments on.

pub mod analysis;
pub mod error;
pub mod fixture_lab;
pub mod masking;
pub mod merging;
pub mod seed;
pub mod sweep;
pub mod task_vectors;
pub mod tensor_store;

pub use analysis::{cosine_matrix, delta_stats, normalized_accuracy, EvalReport, SimilarityMatrix};
pub use error::{Error, ErrorClass, Result};
pub use masking::{apply_mask, build_mask, sparsity_report, MaskScope, MaskSet, MaskSpec, MaskVariant};
pub use merging::{MergeConfig, MergeMethod, MergeRegistry, MergeStrategy};
pub use seed::derive_seed;
pub use sweep::{EvalScope, GridSpec, Harness, SubsetTuning, TaskEvaluator};
pub use task_vectors::{apply, diff, linear_combine, TaskVector};
pub use tensor_store::{read_checkpoint, write_checkpoint, Checkpoint, TensorRecord};
