//! Reference-point encoding, bilinear sampling, and multi-scale deformable
//! attention in its vanilla and decoupled (DMD) forms.
//!
//! Every attention stage follows the same recipe. Offsets and logits are
//! generated from the query. Logits are softmax-normalized per head over the
//! stage's `levels × points` samples. The weighted samples are aggregated
//! per head in the full `C`-channel value space, then projected per head to
//! `C/N_h` channels and back to `C` by the output map. By linearity this
//! equals projecting every sample before weighting, at a fraction of the
//! cost.
//!
//! Offsets are generated in cells of the level they sample from.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{primitive_forward, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{normal, Bound, ParamSet, INIT_SD};
use crate::synth::FeaturePyramid;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Vanilla,
    /// Multi-scale stage first, then multi-point on the largest level.
    #[default]
    ScaleThenSample,
    SampleThenScale,
    /// Both stages from the same query, summed.
    Parallel,
}

impl Variant {
    pub const ALL: [Variant; 4] =
        [Variant::Vanilla, Variant::ScaleThenSample, Variant::SampleThenScale, Variant::Parallel];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::ScaleThenSample => "scale-then-sample",
            Variant::SampleThenScale => "sample-then-scale",
            Variant::Parallel => "parallel",
        }
    }

    pub fn is_decoupled(self) -> bool {
        self != Variant::Vanilla
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        let norm = norm.strip_prefix("dmd-").unwrap_or(&norm);
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown attention variant {s:?}")))
    }
}

/// Points read per query per head.
pub fn count_samples(variant: Variant, levels: usize, points: usize) -> usize {
    match variant {
        Variant::Vanilla => levels * points,
        _ => levels + points,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MsdaConfig {
    pub num_heads: usize,
    pub num_levels: usize,
    pub num_points: usize,
    pub channels: usize,
    pub variant: Variant,
}

impl Default for MsdaConfig {
    fn default() -> Self {
        Self { num_heads: 8, num_levels: 3, num_points: 4, channels: 256, variant: Variant::ScaleThenSample }
    }
}

impl MsdaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || !self.channels.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "attention: C={} not divisible by N_h={}",
                self.channels, self.num_heads
            )));
        }
        if self.num_levels == 0 || self.num_points == 0 {
            return Err(Error::Config("attention: M and N must be at least 1".into()));
        }
        Ok(())
    }

    pub fn sample_count(&self) -> usize {
        count_samples(self.variant, self.num_levels, self.num_points)
    }

    /// `(levels, points)` of each stage in evaluation order: the scale
    /// stage reads every level once, the sample stage reads the largest
    /// level `N` times.
    fn stage_shapes(&self) -> Vec<(usize, usize)> {
        let (m, n) = (self.num_levels, self.num_points);
        match self.variant {
            Variant::Vanilla => vec![(m, n)],
            Variant::ScaleThenSample | Variant::Parallel => vec![(m, 1), (1, n)],
            Variant::SampleThenScale => vec![(1, n), (m, 1)],
        }
    }
}

/// Weights of one attention stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageParams<T> {
    pub levels: usize,
    pub points: usize,
    /// `[C, N_h·levels·points·2]`
    pub w_off: T,
    pub b_off: T,
    /// `[C, N_h·levels·points]`
    pub w_att: T,
    pub b_att: T,
    /// Per-head value projections, `[N_h, C, C/N_h]`.
    pub w_value: T,
    /// Stacked per-head output projections, `[C, C]`.
    pub w_out: T,
}

impl<T> StageParams<T> {
    fn fields(&self) -> [(&'static str, &T); 6] {
        [
            ("w_off", &self.w_off),
            ("b_off", &self.b_off),
            ("w_att", &self.w_att),
            ("b_att", &self.b_att),
            ("w_value", &self.w_value),
            ("w_out", &self.w_out),
        ]
    }

    fn try_map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> Result<U>) -> Result<StageParams<U>> {
        let mut g = |field: &str, t: &T| f(&format!("{prefix}.{field}"), t);
        Ok(StageParams {
            levels: self.levels,
            points: self.points,
            w_off: g("w_off", &self.w_off)?,
            b_off: g("b_off", &self.b_off)?,
            w_att: g("w_att", &self.w_att)?,
            b_att: g("b_att", &self.b_att)?,
            w_value: g("w_value", &self.w_value)?,
            w_out: g("w_out", &self.w_out)?,
        })
    }
}

/// Attention weights. Decoupled variants carry two stages and the two
/// post-stage linear maps; vanilla carries one stage and no maps.
#[derive(Clone, Debug, PartialEq)]
pub struct MsdaParams<T> {
    pub config: MsdaConfig,
    pub stages: Vec<StageParams<T>>,
    /// `(weight [C, C], bias [C])` of Linear₁ and Linear₂.
    pub post: Vec<(T, T)>,
}

fn stage_name(cfg: &MsdaConfig, i: usize) -> &'static str {
    match (cfg.variant, i) {
        (Variant::Vanilla, _) => "stage",
        (Variant::SampleThenScale, 0) | (Variant::ScaleThenSample | Variant::Parallel, 1) => "sample",
        _ => "scale",
    }
}

impl<T> MsdaParams<T> {
    /// Applies `f` to every tensor with its full parameter name.
    pub fn try_map<U>(&self, prefix: &str, mut f: impl FnMut(&str, &T) -> Result<U>) -> Result<MsdaParams<U>> {
        let stages = self
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| s.try_map(&format!("{prefix}.{}", stage_name(&self.config, i)), &mut f))
            .collect::<Result<_>>()?;
        let post = self
            .post
            .iter()
            .enumerate()
            .map(|(i, (w, b))| {
                Ok((f(&format!("{prefix}.linear{}.w", i + 1), w)?, f(&format!("{prefix}.linear{}.b", i + 1), b)?))
            })
            .collect::<Result<_>>()?;
        Ok(MsdaParams { config: self.config, stages, post })
    }

    /// Every tensor with its full parameter name.
    pub fn named(&self, prefix: &str) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            for (field, t) in s.fields() {
                out.push((format!("{prefix}.{}.{field}", stage_name(&self.config, i)), t));
            }
        }
        for (i, (w, b)) in self.post.iter().enumerate() {
            out.push((format!("{prefix}.linear{}.w", i + 1), w));
            out.push((format!("{prefix}.linear{}.b", i + 1), b));
        }
        out
    }
}

impl MsdaParams<Tensor> {
    /// Gaussian weights (sd 0.02), zero biases except the offset bias, which
    /// spreads each head's samples along its own direction.
    pub fn init(config: MsdaConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (c, h) = (config.channels, config.num_heads);
        let stages = config
            .stage_shapes()
            .into_iter()
            .map(|(levels, points)| {
                let mut b_off = Vec::with_capacity(h * levels * points * 2);
                for head in 0..h {
                    let theta = std::f64::consts::TAU * head as f64 / h as f64;
                    let (s, co) = theta.sin_cos();
                    let norm = s.abs().max(co.abs());
                    for _ in 0..levels {
                        for k in 0..points {
                            b_off.push(co / norm * (k + 1) as f64);
                            b_off.push(s / norm * (k + 1) as f64);
                        }
                    }
                }
                StageParams {
                    levels,
                    points,
                    w_off: normal(&[c, h * levels * points * 2], INIT_SD, rng),
                    b_off: Tensor::from_vec(b_off),
                    w_att: normal(&[c, h * levels * points], INIT_SD, rng),
                    b_att: Tensor::zeros(&[h * levels * points]),
                    w_value: normal(&[h, c, c / h], INIT_SD, rng),
                    w_out: normal(&[c, c], INIT_SD, rng),
                }
            })
            .collect();
        let post = if config.variant.is_decoupled() {
            (0..2).map(|_| (normal(&[c, c], INIT_SD, rng), Tensor::zeros(&[c]))).collect()
        } else {
            Vec::new()
        };
        Ok(Self { config, stages, post })
    }

    pub fn insert_into(&self, prefix: &str, set: &mut ParamSet) -> Result<()> {
        for (name, t) in self.named(prefix) {
            set.insert(name, t.clone())?;
        }
        Ok(())
    }

    /// Rebuilds the structure from a parameter set holding tensors named as
    /// by [`MsdaParams::named`].
    pub fn from_set(config: MsdaConfig, prefix: &str, set: &ParamSet) -> Result<Self> {
        Self::layout(config)?.try_map(prefix, |name, _| set.get(name).cloned())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> MsdaParams<Var> {
        self.try_map("", |_, t| Ok(if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) }))
            .expect("binding cannot fail")
    }

    fn layout(config: MsdaConfig) -> Result<MsdaParams<()>> {
        config.validate()?;
        let stages = config
            .stage_shapes()
            .into_iter()
            .map(|(levels, points)| StageParams {
                levels,
                points,
                w_off: (),
                b_off: (),
                w_att: (),
                b_att: (),
                w_value: (),
                w_out: (),
            })
            .collect();
        let post = if config.variant.is_decoupled() { vec![((), ()); 2] } else { Vec::new() };
        Ok(MsdaParams { config, stages, post })
    }
}

impl MsdaParams<Var> {
    pub fn from_bound(config: MsdaConfig, prefix: &str, bound: &Bound) -> Result<Self> {
        MsdaParams::<Tensor>::layout(config)?.try_map(prefix, |name, _| bound.get(name))
    }
}

/// Tape nodes for one attention evaluation.
#[derive(Clone, Debug)]
pub struct MsdaNodes {
    /// `[Q, C]`
    pub output: Var,
    /// Normalized weights of each stage, `[Q·N_h, levels·points]`.
    pub attention: Vec<Var>,
}

/// A pyramid placed on a tape in channel-last `h×w×C` layout, with level
/// sizes.
#[derive(Clone, Debug)]
pub struct PyramidVars {
    pub levels: Vec<Var>,
    pub dims: Vec<(usize, usize)>,
}

impl PyramidVars {
    pub fn constant(tape: &mut Tape, pyramid: &FeaturePyramid) -> Self {
        Self {
            levels: channel_last(pyramid).into_iter().map(|l| tape.constant(l)).collect(),
            dims: pyramid.level_shapes(),
        }
    }
}

/// Levels of `pyramid` transposed to `h×w×C`.
pub fn channel_last(pyramid: &FeaturePyramid) -> Vec<Tensor> {
    let perm = Op::Permute { perm: vec![1, 2, 0] };
    pyramid.levels.iter().map(|l| primitive_forward(&perm, &[l]).expect("pyramid levels are rank 3")).collect()
}

fn stage_forward(
    tape: &mut Tape,
    st: &StageParams<Var>,
    heads: usize,
    query: Var,
    levels: &[Var],
    refs: Var,
) -> Result<(Var, Var)> {
    let q = tape.shape(query)[0];
    let (nl, np) = (st.levels, st.points);
    let off = tape.linear(query, st.w_off, st.b_off)?;
    let off = tape.reshape(off, &[q * heads, nl * np, 2])?;
    let logits = tape.linear(query, st.w_att, st.b_att)?;
    let logits = tape.reshape(logits, &[q * heads, nl * np])?;
    let attn = tape.softmax(logits, 1)?;
    if levels.len() < nl {
        return Err(Error::contract("msda", format!("stage reads {nl} levels, {} given", levels.len())));
    }
    let per_head = tape.deformable_attend(refs, off, attn, st.w_value, &levels[..nl], heads, np)?;
    let out = tape.matmul(per_head, st.w_out)?;
    Ok((out, attn))
}

/// Multi-scale deformable attention of `query [Q, C]` at reference points
/// `refs [Q, 2]` (normalized) over the pyramid, in the configured variant.
pub fn msda(
    tape: &mut Tape,
    params: &MsdaParams<Var>,
    query: Var,
    pyramid: &PyramidVars,
    refs: Var,
) -> Result<MsdaNodes> {
    let cfg = &params.config;
    if pyramid.levels.len() != cfg.num_levels {
        return Err(Error::contract(
            "msda",
            format!("pyramid has {} levels, attention expects {}", pyramid.levels.len(), cfg.num_levels),
        ));
    }
    let qs = tape.shape(query).to_vec();
    if qs.len() != 2 || qs[1] != cfg.channels || tape.shape(refs) != [qs[0], 2] {
        return Err(Error::contract(
            "msda",
            format!("query {:?} and reference {:?} do not match C={}", qs, tape.shape(refs), cfg.channels),
        ));
    }
    let heads = cfg.num_heads;

    let all = &pyramid.levels[..];
    let top = &pyramid.levels[..1];
    let levels_for = |st: &StageParams<Var>| if st.levels == 1 && cfg.num_levels > 1 { top } else { all };

    match cfg.variant {
        Variant::Vanilla => {
            let st = &params.stages[0];
            let (out, a) = stage_forward(tape, st, heads, query, all, refs)?;
            Ok(MsdaNodes { output: out, attention: vec![a] })
        }
        Variant::ScaleThenSample | Variant::SampleThenScale => {
            let (s1, s2) = (&params.stages[0], &params.stages[1]);
            let (o1, a1) = stage_forward(tape, s1, heads, query, levels_for(s1), refs)?;
            let q1 = tape.linear(o1, params.post[0].0, params.post[0].1)?;
            let (o2, a2) = stage_forward(tape, s2, heads, q1, levels_for(s2), refs)?;
            let o2 = tape.linear(o2, params.post[1].0, params.post[1].1)?;
            let out = tape.add(q1, o2)?;
            Ok(MsdaNodes { output: out, attention: vec![a1, a2] })
        }
        Variant::Parallel => {
            let (s1, s2) = (&params.stages[0], &params.stages[1]);
            let (o1, a1) = stage_forward(tape, s1, heads, query, all, refs)?;
            let (o2, a2) = stage_forward(tape, s2, heads, query, top, refs)?;
            let o1 = tape.linear(o1, params.post[0].0, params.post[0].1)?;
            let o2 = tape.linear(o2, params.post[1].0, params.post[1].1)?;
            let out = tape.add(o1, o2)?;
            Ok(MsdaNodes { output: out, attention: vec![a1, a2] })
        }
    }
}

/// Result of evaluating attention outside of training.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledValue {
    /// `[Q, C]`
    pub output: Tensor,
    pub sample_count: usize,
    /// Normalized weights per stage, `[Q·N_h, group size]`.
    pub attention: Vec<Tensor>,
}

fn evaluate(
    query: &Tensor,
    pyramid: &FeaturePyramid,
    refs: &Tensor,
    params: &MsdaParams<Tensor>,
) -> Result<SampledValue> {
    let mut tape = Tape::inference();
    let pv = PyramidVars::constant(&mut tape, pyramid);
    let p = params.bind(&mut tape, false);
    let q = tape.constant(query.clone());
    let r = tape.constant(refs.clone());
    let nodes = msda(&mut tape, &p, q, &pv, r)?;
    Ok(SampledValue {
        output: tape.value(nodes.output).clone(),
        sample_count: params.config.sample_count(),
        attention: nodes.attention.iter().map(|&a| tape.value(a).clone()).collect(),
    })
}

pub fn msda_vanilla(
    query: &Tensor,
    pyramid: &FeaturePyramid,
    refs: &Tensor,
    params: &MsdaParams<Tensor>,
) -> Result<SampledValue> {
    if params.config.variant != Variant::Vanilla {
        return Err(Error::contract("msda_vanilla", format!("variant is {}", params.config.variant)));
    }
    evaluate(query, pyramid, refs, params)
}

pub fn msda_dmd(
    query: &Tensor,
    pyramid: &FeaturePyramid,
    refs: &Tensor,
    params: &MsdaParams<Tensor>,
) -> Result<SampledValue> {
    if !params.config.variant.is_decoupled() {
        return Err(Error::contract("msda_dmd", "variant is vanilla"));
    }
    evaluate(query, pyramid, refs, params)
}

/// Sinusoidal embedding of normalized `Q×2` coordinates into `Q×C`: the
/// first `C/2` channels encode x, the rest y, each as interleaved sin/cos.
pub fn sinusoidal_pe(coords: &Tensor, channels: usize) -> Result<Tensor> {
    if coords.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::contract("sinusoidal_pe", "coordinates must lie in [0, 1]"));
    }
    primitive_forward(&Op::SinusoidalPe { channels }, &[coords])
}

/// Bilinear lookup of normalized points `K×2` in a `C×h×w` grid, zero
/// outside; cell centers sit at `(i + 0.5) / size`.
pub fn bilinear_sample(grid: &Tensor, pts: &Tensor) -> Result<Tensor> {
    if !grid.is_finite() {
        return Err(Error::NonFinite { stage: "bilinear_sample grid".into() });
    }
    primitive_forward(&Op::BilinearSample, &[grid, pts])
}

/// One row of attention timing results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub variant: Variant,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub queries: usize,
    pub mean_ms: f64,
    pub sd_ms: f64,
    pub sample_count: usize,
}

/// Times repeated attention evaluations of fixed inputs, one row per
/// parameter set. Repeats are interleaved across the sets so slow drift in
/// machine load affects every row alike. Placing the pyramid and weights on
/// the tape is excluded; one warm-up round precedes the timed ones.
pub fn benchmark(
    params: &[MsdaParams<Tensor>],
    pyramid: &FeaturePyramid,
    query: &Tensor,
    refs: &Tensor,
    repeats: usize,
) -> Result<Vec<BenchRow>> {
    if repeats == 0 {
        return Err(Error::Config("benchmark needs at least one repeat".into()));
    }
    let mut tape = Tape::inference();
    let pv = PyramidVars::constant(&mut tape, pyramid);
    let bound: Vec<_> = params.iter().map(|p| p.bind(&mut tape, false)).collect();
    let q = tape.constant(query.clone());
    let r = tape.constant(refs.clone());
    let mark = tape.len();
    let mut times = vec![Vec::with_capacity(repeats); params.len()];
    for round in 0..=repeats {
        for (p, t) in bound.iter().zip(&mut times) {
            let start = Instant::now();
            let nodes = msda(&mut tape, p, q, &pv, r)?;
            std::hint::black_box(tape.value(nodes.output).data()[0]);
            let elapsed = start.elapsed().as_secs_f64() * 1e3;
            tape.truncate(mark);
            if round > 0 {
                t.push(elapsed);
            }
        }
    }
    Ok(params
        .iter()
        .zip(times)
        .map(|(p, t)| {
            let n = t.len() as f64;
            let mean = t.iter().sum::<f64>() / n;
            let var = if t.len() > 1 { t.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
            let cfg = p.config;
            BenchRow {
                variant: cfg.variant,
                m: cfg.num_levels,
                n: cfg.num_points,
                queries: query.shape()[0],
                mean_ms: mean,
                sd_ms: var.sqrt(),
                sample_count: cfg.sample_count(),
            }
        })
        .collect())
}
