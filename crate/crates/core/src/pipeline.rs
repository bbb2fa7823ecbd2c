//! End-to-end steps shared by the command line and the experiments: prior
//! fitting, sample preparation, training, evaluation and validation-time
//! stability. Every random choice comes from a named stream of the run seed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{benchmark, BenchRow, MsdaConfig, MsdaParams, Variant};
use crate::config::{BenchConfig, RunConfig};
use crate::decoder::{Model, PriorMode};
use crate::error::{Error, Result};
use crate::eval::{evaluate, predictions_from_layer, EvalReport};
use crate::geometry::{BevExtent, MapElement, Scene};
use crate::matching::{unstable_scores, StabilityReport};
use crate::params::normal;
use crate::prior::{abstract_priors, canonical_kmeans, FitMeta, KMeansFit, PriorBank};
use crate::rng;
use crate::synth::{generate_dataset, FeaturePyramid};
use crate::tensor::Tensor;
use crate::train::{match_layer, train, Sample, StepLog, TrainOutcome};

/// Stream names of the sub-seeds.
pub mod streams {
    pub const TRAIN_DATA: &str = "data.train";
    pub const EVAL_DATA: &str = "data.eval";
    pub const RENDER: &str = "render";
    pub const KMEANS: &str = "prior.kmeans";
    pub const MODEL: &str = "model";
    pub const BENCH: &str = "bench";
}

pub fn train_scenes(cfg: &RunConfig) -> Result<Vec<Scene>> {
    generate_dataset(&cfg.scene, cfg.data.train_count, cfg.stream_seed(streams::TRAIN_DATA))
}

pub fn eval_scenes(cfg: &RunConfig) -> Result<Vec<Scene>> {
    generate_dataset(&cfg.scene, cfg.data.eval_count, cfg.stream_seed(streams::EVAL_DATA))
}

/// Clusters every element of `scenes`, resampled to the decoder's point
/// count, and abstracts the largest clusters into a bank.
pub fn fit_priors(scenes: &[Scene], fingerprint: &str, cfg: &RunConfig) -> Result<(PriorBank, KMeansFit)> {
    let Some(first) = scenes.first() else {
        return Err(Error::Fit("no scenes to fit priors on".into()));
    };
    let extent = first.extent;
    let elements: Vec<MapElement> = scenes
        .iter()
        .flat_map(|s| s.elements.iter())
        .map(|e| e.resampled(cfg.decoder.num_points))
        .collect::<Result<_>>()?;
    let seed = cfg.stream_seed(streams::KMEANS);
    let fit = canonical_kmeans(&elements, &extent, cfg.prior.k, seed, cfg.prior.max_iters)?;
    let meta =
        FitMeta { k: cfg.prior.k, seed, iterations: fit.iterations, dataset_fingerprint: fingerprint.to_string() };
    let bank = abstract_priors(&fit.clusters, cfg.decoder.num_prior, meta)?;
    Ok((bank, fit))
}

/// Renders features and targets. The render seed is shared across splits
/// so train and eval features come from the same projection.
pub fn prepare_samples(scenes: &[Scene], cfg: &RunConfig) -> Result<Vec<Sample>> {
    let seed = cfg.stream_seed(streams::RENDER);
    scenes.iter().map(|s| Sample::prepare(s, &cfg.decoder, seed)).collect()
}

/// The bank the configured prior mode needs, if any.
pub fn bank_for(mode: PriorMode, bank: Option<&PriorBank>) -> Result<Option<&PriorBank>> {
    match (mode, bank) {
        (PriorMode::Random, _) => Ok(None),
        (PriorMode::Prior, Some(b)) => Ok(Some(b)),
        (PriorMode::Prior, None) => Err(Error::Config("prior mode needs a prior bank".into())),
    }
}

pub fn init_model(cfg: &RunConfig) -> Result<Model> {
    Model::init(cfg.decoder, cfg.train.prior_mode, cfg.stream_seed(streams::MODEL))
}

/// Fresh model trained under `cfg`.
pub fn train_model(
    cfg: &RunConfig,
    bank: Option<&PriorBank>,
    samples: &[Sample],
    on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    let bank = bank_for(cfg.train.prior_mode, bank)?;
    train(init_model(cfg)?, bank, samples, &cfg.objective(), &cfg.train_config(), on_step)
}

/// Scores the last decoder layer on `samples` against their scenes.
pub fn evaluate_model(
    model: &Model,
    bank: Option<&PriorBank>,
    samples: &[Sample],
    scenes: &[Scene],
    cfg: &RunConfig,
) -> Result<EvalReport> {
    if samples.len() != scenes.len() {
        return Err(Error::contract(
            "evaluate_model",
            format!("{} samples for {} scenes", samples.len(), scenes.len()),
        ));
    }
    let bank = bank_for(model.mode, bank)?;
    let mut preds = Vec::with_capacity(samples.len());
    for (sample, scene) in samples.iter().zip(scenes) {
        let outs = model.forward(bank, &sample.pyramid)?;
        let last = outs.last().expect("at least one layer");
        preds.push(predictions_from_layer(last, &scene.extent)?);
    }
    let gts: Vec<Vec<MapElement>> = scenes.iter().map(|s| s.elements.clone()).collect();
    evaluate(&preds, &gts, &cfg.eval)
}

/// Layer-to-layer stability of a fixed model, per sample and pooled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationStability {
    pub pooled: StabilityReport,
    pub per_scene: Vec<StabilityReport>,
}

pub fn validation_stability(
    model: &Model,
    bank: Option<&PriorBank>,
    samples: &[Sample],
    cfg: &RunConfig,
) -> Result<ValidationStability> {
    let bank = bank_for(model.mode, bank)?;
    let per_scene = samples
        .iter()
        .map(|s| {
            let outs = model.forward(bank, &s.pyramid)?;
            let assignments = outs
                .iter()
                .map(|o| match_layer(&o.class_logits, &o.point_coords, model.config.num_points, &s.gts, &cfg.cost))
                .collect::<Result<Vec<_>>>()?;
            unstable_scores(&assignments)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ValidationStability { pooled: StabilityReport::pool(&per_scene)?, per_scene })
}

/// Fixed random inputs of the attention benchmark: a pyramid whose level
/// `l` is `⌈grid/2^l⌉`, unit-normal queries and references in (0.05, 0.95).
pub fn bench_inputs(cfg: &BenchConfig, seed: u64) -> (FeaturePyramid, Tensor, Tensor) {
    let a = cfg.attention;
    let mut r = rng::stream(seed, "bench.inputs");
    let levels = (0..a.num_levels)
        .map(|l| {
            let h = cfg.grid_h.div_ceil(1 << l).max(1);
            let w = cfg.grid_w.div_ceil(1 << l).max(1);
            normal(&[a.channels, h, w], 1.0, &mut r)
        })
        .collect();
    let extent = BevExtent { h: cfg.grid_h, w: cfg.grid_w, ..Default::default() };
    let query = normal(&[cfg.queries, a.channels], 1.0, &mut r);
    let refs =
        Tensor::from_parts(vec![cfg.queries, 2], (0..2 * cfg.queries).map(|_| r.gen_range(0.05..0.95)).collect());
    (FeaturePyramid { levels, extent }, query, refs)
}

/// Attention weights for `variant` under the benchmark configuration.
pub fn bench_params(cfg: &BenchConfig, variant: Variant, seed: u64) -> Result<MsdaParams<Tensor>> {
    let config = MsdaConfig { variant, ..cfg.attention };
    MsdaParams::init(config, &mut rng::stream(seed, &format!("bench.params.{variant}")))
}

/// Times every listed variant on shared inputs.
pub fn run_bench(cfg: &BenchConfig, variants: &[Variant], seed: u64) -> Result<Vec<BenchRow>> {
    if variants.is_empty() {
        return Err(Error::Config("no attention variants to benchmark".into()));
    }
    let (pyramid, query, refs) = bench_inputs(cfg, seed);
    let params = variants.iter().map(|&v| bench_params(cfg, v, seed)).collect::<Result<Vec<_>>>()?;
    benchmark(&params, &pyramid, &query, &refs, cfg.repeats)
}

/// CSV with the columns `variant,M,N,queries,mean_ms,sd_ms,sample_count`.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("variant,M,N,queries,mean_ms,sd_ms,sample_count\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.variant, r.m, r.n, r.queries, r.mean_ms, r.sd_ms, r.sample_count
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let o = [
            "scene.extent.h=24",
            "scene.extent.w=12",
            "data.train_count=6",
            "data.eval_count=3",
            "prior.k=8",
            "decoder.num_instances=6",
            "decoder.num_prior=3",
            "decoder.num_points=4",
            "decoder.channels=16",
            "decoder.layers=2",
            "decoder.self_heads=2",
            "decoder.ffn_dim=16",
            "decoder.embed_dim=4",
            "decoder.cross_heads=2",
            "decoder.levels=2",
            "decoder.cross_points=2",
            "train.steps=4",
        ];
        RunConfig::load(None, &o.map(String::from)).unwrap()
    }

    #[test]
    fn pipeline_runs_in_both_modes() {
        let cfg = tiny();
        let scenes = train_scenes(&cfg).unwrap();
        let (bank, fit) = fit_priors(&scenes, "fp", &cfg).unwrap();
        assert_eq!(bank.priors.len(), 3);
        assert_eq!(bank.n_p, 4);
        assert_eq!(fit.clusters.len(), 8);
        let samples = prepare_samples(&scenes, &cfg).unwrap();
        let ev_scenes = eval_scenes(&cfg).unwrap();
        let ev = prepare_samples(&ev_scenes, &cfg).unwrap();
        for mode in [PriorMode::Prior, PriorMode::Random] {
            let mut c = cfg.clone();
            c.train.prior_mode = mode;
            let out = train_model(&c, Some(&bank), &samples, |_| {}).unwrap();
            assert_eq!(out.log.len(), 4);
            let report = evaluate_model(&out.model, Some(&bank), &ev, &ev_scenes, &c).unwrap();
            assert!((0.0..=1.0).contains(&report.map));
            let v = validation_stability(&out.model, Some(&bank), &ev, &c).unwrap();
            assert_eq!(v.per_scene.len(), 3);
            assert!((0.0..=1.0).contains(&v.pooled.u_t));
        }
    }

    #[test]
    fn prior_mode_without_bank_is_a_config_error() {
        let cfg = tiny();
        let samples = prepare_samples(&train_scenes(&cfg).unwrap(), &cfg).unwrap();
        assert!(matches!(train_model(&cfg, None, &samples, |_| {}), Err(Error::Config(_))));
    }

    #[test]
    fn bench_rows_follow_variants() {
        let mut cfg = BenchConfig { queries: 5, repeats: 2, grid_h: 9, grid_w: 7, ..BenchConfig::default() };
        cfg.attention = MsdaConfig { channels: 16, num_heads: 2, num_levels: 3, num_points: 4, ..cfg.attention };
        let (pyr, q, r) = bench_inputs(&cfg, 1);
        assert_eq!(pyr.level_shapes(), vec![(9, 7), (5, 4), (3, 2)]);
        assert_eq!((q.shape(), r.shape()), (&[5, 16][..], &[5, 2][..]));
        let rows = run_bench(&cfg, &[Variant::Vanilla, Variant::ScaleThenSample], 1).unwrap();
        assert_eq!(rows.iter().map(|r| r.sample_count).collect::<Vec<_>>(), vec![12, 7]);
        let csv = bench_csv(&rows);
        assert!(csv.starts_with("variant,M,N,queries,mean_ms,sd_ms,sample_count\nvanilla,3,4,5,"));
        assert!(run_bench(&cfg, &[], 1).is_err());
    }

    #[test]
    fn splits_differ_and_repeat() {
        let cfg = tiny();
        assert_ne!(train_scenes(&cfg).unwrap()[0], eval_scenes(&cfg).unwrap()[0]);
        assert_eq!(train_scenes(&cfg).unwrap(), train_scenes(&cfg).unwrap());
    }
}
