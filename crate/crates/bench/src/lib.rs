//! Shared fixtures for the criterion benches.

use priormap_core::config::{BenchConfig, RunConfig};
use priormap_core::pipeline;
use priormap_core::train::Sample;
use priormap_core::Result;

/// Benchmark-sized attention inputs with fewer queries than the CLI default
/// so one criterion sample stays short.
pub fn attention_config(queries: usize) -> BenchConfig {
    BenchConfig { queries, ..BenchConfig::default() }
}

/// The toy decoder configuration used by the stability experiment.
pub fn toy_run() -> Result<RunConfig> {
    let o = [
        "decoder.channels=32",
        "decoder.num_instances=12",
        "decoder.num_prior=6",
        "decoder.num_points=8",
        "decoder.layers=3",
        "decoder.self_heads=4",
        "decoder.ffn_dim=64",
        "decoder.cross_heads=4",
        "data.train_count=20",
    ];
    RunConfig::load(None, &o.map(String::from))
}

/// One prepared training sample of the toy configuration.
pub fn toy_sample(cfg: &RunConfig) -> Result<Sample> {
    let scenes = pipeline::train_scenes(cfg)?;
    Ok(pipeline::prepare_samples(&scenes[..1], cfg)?.remove(0))
}
