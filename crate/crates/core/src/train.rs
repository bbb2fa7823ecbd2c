//! Toy training loop with per-step matching and stability logging.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::PyramidVars;
use crate::autodiff::{Tape, Var};
use crate::decoder::{cell_embeddings, decode, init_reference_points, DecoderConfig, LayerNodes, Model, PriorMode};
use crate::error::{Error, Result};
use crate::geometry::{normalize, MapElement, Point, Scene};
use crate::loss::{total_loss, LossBreakdown, LossConfig};
use crate::matching::{hungarian, unstable_scores, Assignment, CostConfig, CostMatrix, StabilityReport};
use crate::prior::PriorBank;
use crate::rng;
use crate::synth::{rasterize_instances, render_bev, FeaturePyramid, InstanceMask};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Per-coordinate step scaled by a running RMS of the gradient.
    #[default]
    Rmsprop,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// RMS decay.
    pub rms_decay: f64,
    pub rms_eps: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    pub batch_size: usize,
    /// Filled from the run seed; not part of the config file.
    #[serde(skip)]
    pub seed: u64,
    pub prior_mode: PriorMode,
    /// Fraction of final steps pooled into the summary's final scores.
    pub final_window: f64,
    /// Keep every step's per-layer query-of-GT table in the log.
    pub trace_assignments: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Rmsprop,
            rms_decay: 0.99,
            rms_eps: 1e-8,
            grad_clip: 1.0,
            batch_size: 1,
            seed: 0,
            prior_mode: PriorMode::Prior,
            final_window: 0.1,
            trace_assignments: false,
        }
    }
}

impl TrainConfig {
    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("train: steps and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("train: learning_rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.rms_decay) || !(self.rms_eps > 0.0) || !(self.grad_clip >= 0.0) {
            return Err(Error::Config("train: rms_decay in [0, 1), rms_eps > 0 and grad_clip ≥ 0 are required".into()));
        }
        if !(self.final_window > 0.0 && self.final_window <= 1.0) {
            return Err(Error::Config("train: final_window must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// A scene prepared for the decoder: its feature pyramid, GT elements
/// resampled to `N_P` in normalized coordinates, and its instance mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub pyramid: FeaturePyramid,
    pub gts: Vec<MapElement>,
    pub mask: InstanceMask,
}

impl Sample {
    /// `render_seed` fixes the feature projection shared by a dataset.
    pub fn prepare(scene: &Scene, cfg: &DecoderConfig, render_seed: u64) -> Result<Self> {
        let pyramid = render_bev(scene, cfg.channels, cfg.levels, render_seed)?;
        let gts = normalized_targets(scene, cfg.num_points)?;
        Ok(Self { pyramid, gts, mask: rasterize_instances(scene) })
    }
}

/// Scene elements resampled to `n` points and mapped to the unit square.
pub fn normalized_targets(scene: &Scene, n: usize) -> Result<Vec<MapElement>> {
    scene
        .elements
        .iter()
        .map(|e| {
            let r = e.resampled(n)?;
            Ok(MapElement { points: normalize(&r.points, &scene.extent)?, ..r })
        })
        .collect()
}

/// Splits a `[N_I·N_P, 2]` point tensor into per-instance point lists.
pub fn instance_points(points: &Tensor, num_points: usize) -> Vec<Vec<Point>> {
    points.data().chunks(2 * num_points).map(|c| c.chunks(2).map(|p| [p[0], p[1]]).collect()).collect()
}

/// Optimal assignment of one layer's predictions to `gts`.
pub fn match_layer(
    logits: &Tensor,
    points: &Tensor,
    num_points: usize,
    gts: &[MapElement],
    cfg: &CostConfig,
) -> Result<Assignment> {
    let rows: Vec<Vec<f64>> = logits.data().chunks(logits.shape()[1]).map(<[f64]>::to_vec).collect();
    let cm = CostMatrix::build(&rows, &instance_points(points, num_points), gts, cfg)?;
    hungarian(&cm)
}

/// Assignments of every layer of a decoded pass.
pub fn match_layers(
    tape: &Tape,
    nodes: &[LayerNodes],
    num_points: usize,
    gts: &[MapElement],
    cfg: &CostConfig,
) -> Result<Vec<Assignment>> {
    nodes.iter().map(|n| match_layer(tape.value(n.logits), tape.value(n.points), num_points, gts, cfg)).collect()
}

/// Everything a training step or an evaluation pass needs besides data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Objective {
    pub cost: CostConfig,
    pub loss: LossConfig,
}

/// One scene's forward pass on `tape`, its assignments and loss nodes.
pub struct Pass {
    pub nodes: Vec<LayerNodes>,
    pub assignments: Vec<Assignment>,
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Forward pass, matching and loss for one sample with trainable params.
pub fn scene_pass(
    tape: &mut Tape,
    model: &Model,
    bank: Option<&PriorBank>,
    sample: &Sample,
    obj: &Objective,
) -> Result<(Pass, crate::params::Bound)> {
    let bound = model.params.bind(tape);
    let pv = PyramidVars::constant(tape, &sample.pyramid);
    let (refs, _) = init_reference_points(tape, &model.config, model.mode, bank, &bound)?;
    let nodes = decode(tape, &model.config, &bound, &pv, refs)?;
    let assignments = match_layers(tape, &nodes, model.config.num_points, &sample.gts, &obj.cost)?;
    let emb = cell_embeddings(tape, &bound, &pv)?;
    let loss = total_loss(tape, &nodes, &assignments, &sample.gts, emb, &sample.mask, &obj.loss)?;
    let breakdown = loss.breakdown(tape);
    Ok((Pass { nodes, assignments, total: loss.total, breakdown }, bound))
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: LossBreakdown,
    pub stability: StabilityReport,
    /// `[scene][layer][gt]` matched query, when tracing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assignments: Option<Vec<Vec<Vec<Option<usize>>>>>,
}

/// End-of-run stability figures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilitySummary {
    pub prior_mode: PriorMode,
    pub steps: usize,
    pub layers: usize,
    /// GT-pooled scores over the final window of steps.
    pub final_u_per_layer: Vec<f64>,
    pub final_u_t: f64,
    /// GT-pooled scores over all steps.
    pub mean_u_per_layer: Vec<f64>,
    pub mean_u_t: f64,
    pub window_steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<StepLog>,
    pub summary: StabilitySummary,
}

struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    decay: f64,
    eps: f64,
    state: Vec<Vec<f64>>,
}

impl Optimizer {
    fn new(cfg: &TrainConfig, model: &Model) -> Self {
        Self {
            kind: cfg.optimizer,
            lr: cfg.learning_rate,
            decay: cfg.rms_decay,
            eps: cfg.rms_eps,
            state: model.params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        }
    }

    fn step(&mut self, model: &mut Model, grads: &[Vec<f64>]) {
        for (((_, p), g), s) in model.params.iter_mut().zip(grads).zip(&mut self.state) {
            let p = p.data_mut();
            match self.kind {
                OptimizerKind::Sgd => p.iter_mut().zip(g).for_each(|(p, g)| *p -= self.lr * g),
                OptimizerKind::Rmsprop => {
                    for ((p, g), s) in p.iter_mut().zip(g).zip(s.iter_mut()) {
                        *s = self.decay * *s + (1.0 - self.decay) * g * g;
                        *p -= self.lr * g / (s.sqrt() + self.eps);
                    }
                }
            }
        }
    }
}

fn batch_indices(rng: &mut impl Rng, order: &mut [usize], cursor: &mut usize, n: usize, batch: usize) -> Vec<usize> {
    (0..batch)
        .map(|_| {
            if *cursor == 0 {
                order.shuffle(rng);
            }
            let i = order[*cursor];
            *cursor = (*cursor + 1) % n;
            i
        })
        .collect()
}

/// Trains `model` on `samples`. Deterministic in its inputs.
///
/// `on_step` sees every log row as it is produced.
pub fn train(
    mut model: Model,
    bank: Option<&PriorBank>,
    samples: &[Sample],
    obj: &Objective,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    obj.cost.validate()?;
    obj.loss.validate()?;
    if samples.is_empty() {
        return Err(Error::contract("train", "empty dataset"));
    }
    if model.mode != cfg.prior_mode {
        return Err(Error::Config(format!(
            "model built for prior mode {}, training asks for {}",
            model.mode, cfg.prior_mode
        )));
    }
    let mut opt = Optimizer::new(cfg, &model);
    let mut batch_rng = rng::stream(cfg.seed, "train.batch");
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = 0;
    let mut log = Vec::with_capacity(cfg.steps);
    let mut tape = Tape::new();
    for step in 0..cfg.steps {
        let batch = batch_indices(&mut batch_rng, &mut order, &mut cursor, samples.len(), cfg.batch_size);
        let mut grads: Vec<Vec<f64>> = model.params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let mut loss = LossBreakdown::default();
        let mut reports = Vec::with_capacity(batch.len());
        let mut traces = Vec::new();
        let inv = 1.0 / batch.len() as f64;
        for &i in &batch {
            tape.truncate(0);
            let (pass, bound) = match scene_pass(&mut tape, &model, bank, &samples[i], obj) {
                Ok(p) => p,
                Err(Error::NonFinite { .. }) => return Err(Error::Divergence { step, loss: f64::NAN }),
                Err(e) => return Err(e),
            };
            let b = pass.breakdown;
            if !b.total.is_finite() {
                return Err(Error::Divergence { step, loss: b.total });
            }
            loss.total += b.total * inv;
            loss.cls += b.cls * inv;
            loss.pts += b.pts * inv;
            loss.disc += b.disc * inv;
            loss.var += b.var * inv;
            loss.dist += b.dist * inv;
            reports.push(unstable_scores(&pass.assignments)?);
            if cfg.trace_assignments {
                traces.push(pass.assignments.iter().map(Assignment::query_of_gt).collect());
            }
            let g = tape.backward(pass.total)?;
            for (acc, (_, t)) in grads.iter_mut().zip(bound.gradients(&g)) {
                acc.iter_mut().zip(t.data()).for_each(|(a, v)| *a += v * inv);
            }
        }
        let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Divergence { step, loss: loss.total });
        }
        if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            let s = cfg.grad_clip / norm;
            grads.iter_mut().flatten().for_each(|g| *g *= s);
        }
        opt.step(&mut model, &grads);
        let row = StepLog {
            step,
            loss,
            stability: StabilityReport::pool(&reports)?,
            assignments: cfg.trace_assignments.then_some(traces),
        };
        on_step(&row);
        log.push(row);
    }
    let summary = summarize(&log, cfg)?;
    Ok(TrainOutcome { model, log, summary })
}

fn summarize(log: &[StepLog], cfg: &TrainConfig) -> Result<StabilitySummary> {
    let window = ((log.len() as f64 * cfg.final_window).ceil() as usize).clamp(1, log.len());
    let all: Vec<StabilityReport> = log.iter().map(|r| r.stability.clone()).collect();
    let fin = StabilityReport::pool(&all[log.len() - window..])?;
    let mean = StabilityReport::pool(&all)?;
    Ok(StabilitySummary {
        prior_mode: cfg.prior_mode,
        steps: log.len(),
        layers: mean.layers,
        final_u_per_layer: fin.u_per_layer,
        final_u_t: fin.u_t,
        mean_u_per_layer: mean.u_per_layer,
        mean_u_t: mean.u_t,
        window_steps: window,
        initial_loss: log[0].loss.total,
        final_loss: log[log.len() - 1].loss.total,
    })
}

/// CSV header of the training log for `layers` decoder layers.
pub fn log_header(layers: usize) -> String {
    let mut h = String::from("step,loss_total,loss_cls,loss_pts,loss_disc");
    for l in 1..layers {
        let _ = write!(h, ",u_layer{l}");
    }
    h.push_str(",u_t");
    h
}

/// One CSV row; floats use the shortest round-trip form.
pub fn log_row(r: &StepLog) -> String {
    let mut s = format!("{},{},{},{},{}", r.step, r.loss.total, r.loss.cls, r.loss.pts, r.loss.disc);
    for u in &r.stability.u_per_layer {
        let _ = write!(s, ",{u}");
    }
    let _ = write!(s, ",{}", r.stability.u_t);
    s
}
