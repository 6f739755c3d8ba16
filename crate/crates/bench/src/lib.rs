//! Shared fixtures for the criterion benchmarks.

use vae2_core::training::Batch;
use vae2_core::worldmodel::build_dataset;
use vae2_core::{Dataset, Result, Vae2Config, Vae2Model, WorldConfig};

/// Sequences in the benchmark dataset; enough for a few full batches.
pub const DATASET_SIZE: usize = 400;

pub struct Fixture {
    pub config: Vae2Config,
    pub dataset: Dataset,
    pub model: Vae2Model,
    pub batch: Batch,
}

/// Desk-preset config, a fresh model, and the first training batch.
pub fn fixture(seed: u64) -> Result<Fixture> {
    let config = Vae2Config::desk(seed);
    let dataset = build_dataset(&WorldConfig::with_count(DATASET_SIZE), seed)?;
    let model = vae2_core::vae2::init_model(&config, dataset.config.part_len())?;
    let idx: Vec<usize> = (0..config.batch_size).collect();
    let batch = Batch::gather(&dataset.train, &idx)?;
    Ok(Fixture {
        config,
        dataset,
        model,
        batch,
    })
}
