//! Pretraining loop, linear evaluation, cluster indices, embedding export
//! and the gradient-verification suite.

pub mod cluster;
pub mod config;
pub mod experiment;
pub mod export;
pub mod pretrain;
pub mod probe;
pub mod verify;

pub use cluster::{calinski_harabasz, davies_bouldin, ClusterIndex};
pub use config::{LrSchedule, Mode, RunConfig};
pub use experiment::{build_dataset, split_dataset};
pub use export::{export_embeddings, load_embeddings, write_embeddings};
pub use pretrain::{initial_encoder, pretrain, pretrain_from, read_metrics_log, write_metrics_log, MetricsRecord, PretrainOutcome};
pub use probe::{linear_eval, train_linear_probe, LinearProbe, ProbeConfig, ProbeReport};
pub use verify::{run_gradient_suite, GradSuiteReport};
