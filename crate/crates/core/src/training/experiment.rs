//! Dataset preparation shared by the CLI and end-to-end checks.

use std::path::Path;

use crate::data::{generate_gaussian_clusters, load_dataset, train_test_split, Dataset};
use crate::error::Result;
use crate::numerics::SeededRng;

use super::config::RunConfig;

pub(crate) const STREAM_DATA: u64 = 4;
pub(crate) const STREAM_SPLIT: u64 = 6;

/// Loads `data_path` when set, otherwise generates the configured clusters
/// from the run seed.
pub fn build_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data_path {
        Some(path) => load_dataset(Path::new(path)),
        None => generate_gaussian_clusters(
            &cfg.cluster_spec(),
            &mut SeededRng::with_stream(cfg.seed, STREAM_DATA),
        ),
    }
}

/// Stratified train/test split seeded from the run seed.
pub fn split_dataset(cfg: &RunConfig, dataset: &Dataset) -> Result<(Dataset, Dataset)> {
    train_test_split(
        dataset,
        cfg.test_fraction,
        &mut SeededRng::with_stream(cfg.seed, STREAM_SPLIT),
    )
}
