//! Desk-scale model families: synthetic tasks, a small dense-network
//! trainer and an accuracy evaluator.

pub mod data;
pub mod family;
pub mod network;

pub use data::{generate_task, generate_tasks, mixture, Dataset, Split, SyntheticTaskSpec, TaskData};
pub use family::{Family, FamilySpec, FixtureEvaluator, Manifest, TaskAccuracy};
pub use network::{evaluate, finetune, gradient_check, pretrain, Dense, GradientCheck, Mlp, TrainConfig, TrainLog};
