//! The prior-anchored point-set decoder.
//!
//! Queries are hierarchical: one embedding per instance plus one per point
//! slot, summed into `N_I·N_P` tokens laid out instance-major. Every layer
//! runs positional encoding of its reference points, self-attention among
//! instances, self-attention among the points of each instance, deformable
//! cross-attention into the BEV pyramid and a feed-forward block, then
//! predicts class logits and refined points. Refined points become the next
//! layer's references with the gradient cut.
//!
//! Parameter names, as stored in a [`ParamSet`]:
//!
//! | name | shape |
//! |---|---|
//! | `query.instance` | `N_I×C` |
//! | `query.point` | `N_P×C` |
//! | `reference.logits` | `N_lrn×N_P×2` |
//! | `layer{l}.pe.{w,b}` | `C×C`, `C` |
//! | `layer{l}.instance_attn.{q,k,v,o}.{w,b}` | `C×C`, `C` |
//! | `layer{l}.point_attn.{q,k,v,o}.{w,b}` | `C×C`, `C` |
//! | `layer{l}.cross.*` | see [`MsdaParams`] |
//! | `layer{l}.ffn.{w1,b1,w2,b2}` | `C×F`, `F`, `F×C`, `C` |
//! | `layer{l}.cls.{w,b}` | `C×3`, `3` |
//! | `layer{l}.reg.{w1,b1,w2,b2}` | `C×C`, `C`, `C×2`, `2` |
//! | `embed.{w,b}` | `C×E`, `E` |

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{msda, MsdaConfig, MsdaParams, PyramidVars, Variant};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::ClassId;
use crate::params::{normal, Bound, ParamSet, INIT_SD};
use crate::prior::PriorBank;
use crate::rng;
use crate::synth::FeaturePyramid;
use crate::tensor::Tensor;

/// Where the non-prior reference rows come from, and how many there are.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorMode {
    /// The first `N_pri` instances start at the prior bank shapes.
    #[default]
    Prior,
    /// Every instance starts at learnable points.
    Random,
}

impl PriorMode {
    pub fn name(self) -> &'static str {
        match self {
            PriorMode::Prior => "prior",
            PriorMode::Random => "random",
        }
    }
}

impl fmt::Display for PriorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PriorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prior" => Ok(PriorMode::Prior),
            "random" => Ok(PriorMode::Random),
            _ => Err(Error::Config(format!("unknown prior mode {s:?} (expected prior or random)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub num_instances: usize,
    pub num_prior: usize,
    pub num_points: usize,
    pub channels: usize,
    pub layers: usize,
    pub self_heads: usize,
    pub ffn_dim: usize,
    /// Width of the per-cell embedding read by the discriminative loss.
    pub embed_dim: usize,
    pub cross_heads: usize,
    pub levels: usize,
    pub cross_points: usize,
    pub variant: Variant,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_instances: 50,
            num_prior: 9,
            num_points: 20,
            channels: 256,
            layers: 6,
            self_heads: 8,
            ffn_dim: 512,
            embed_dim: 8,
            cross_heads: 8,
            levels: 3,
            cross_points: 4,
            variant: Variant::ScaleThenSample,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("decoder: {m}")));
        if self.num_instances == 0 || self.num_points < 2 || self.layers == 0 {
            return bad("N_I ≥ 1, N_P ≥ 2 and L ≥ 1 are required".into());
        }
        if self.num_prior > self.num_instances {
            return bad(format!("N_pri={} exceeds N_I={}", self.num_prior, self.num_instances));
        }
        if self.channels == 0 || !self.channels.is_multiple_of(4) {
            return bad(format!("C={} must be a positive multiple of 4", self.channels));
        }
        if self.self_heads == 0 || !self.channels.is_multiple_of(self.self_heads) {
            return bad(format!("C={} not divisible by {} self-attention heads", self.channels, self.self_heads));
        }
        if self.ffn_dim == 0 || self.embed_dim == 0 {
            return bad("FFN and embedding widths must be positive".into());
        }
        self.attention().validate()
    }

    pub fn num_learnable(&self, mode: PriorMode) -> usize {
        match mode {
            PriorMode::Prior => self.num_instances - self.num_prior,
            PriorMode::Random => self.num_instances,
        }
    }

    pub fn num_queries(&self) -> usize {
        self.num_instances * self.num_points
    }

    pub fn attention(&self) -> MsdaConfig {
        MsdaConfig {
            num_heads: self.cross_heads,
            num_levels: self.levels,
            num_points: self.cross_points,
            channels: self.channels,
            variant: self.variant,
        }
    }
}

/// Origin of an instance's initial reference points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Prior,
    Learnable,
}

/// Normalized reference points of every instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferencePointSet {
    /// `N_I×N_P×2`
    pub coords: Tensor,
    pub origin: Vec<Origin>,
}

/// Values produced by one decoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerOutput {
    /// `N_I×3`
    pub class_logits: Tensor,
    /// `N_I×N_P×2`, normalized.
    pub point_coords: Tensor,
    pub refined_reference: ReferencePointSet,
    /// `N_I×N_P×C`
    pub query_state: Tensor,
}

/// Tape nodes of one decoder layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerNodes {
    /// `[N_I, 3]`
    pub logits: Var,
    /// `[N_I·N_P, 2]`
    pub points: Var,
    /// `[N_I·N_P, C]`
    pub state: Var,
}

/// Decoder weights together with their configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: DecoderConfig,
    pub mode: PriorMode,
    pub params: ParamSet,
}

fn linear_params(set: &mut ParamSet, name: &str, i: usize, o: usize, rng: &mut impl Rng) -> Result<()> {
    set.insert(format!("{name}.w"), normal(&[i, o], INIT_SD, rng))?;
    set.insert(format!("{name}.b"), Tensor::zeros(&[o]))
}

impl Model {
    /// Fresh weights. All weights come from the `decoder.init` stream of
    /// `seed` and the learnable reference logits from `decoder.reference`,
    /// so the two prior modes share every weight and differ only in how
    /// many instances start from learnable points.
    pub fn init(config: DecoderConfig, mode: PriorMode, seed: u64) -> Result<Self> {
        config.validate()?;
        let (c, f, ni, np) = (config.channels, config.ffn_dim, config.num_instances, config.num_points);
        let mut rng = rng::stream(seed, "decoder.init");
        let mut set = ParamSet::new();
        set.insert("query.instance", normal(&[ni, c], 1.0, &mut rng))?;
        set.insert("query.point", normal(&[np, c], 1.0, &mut rng))?;

        // One logit per instance row; prior mode drops the rows the bank
        // replaces so both modes agree on the remaining ones.
        let mut ref_rng = rng::stream(seed, "decoder.reference");
        let all: Vec<f64> = (0..ni * np * 2)
            .map(|_| {
                let u: f64 = ref_rng.gen_range(0.05..0.95);
                (u / (1.0 - u)).ln()
            })
            .collect();
        let skip = (ni - config.num_learnable(mode)) * np * 2;
        let nl = config.num_learnable(mode);
        set.insert("reference.logits", Tensor::from_parts(vec![nl, np, 2], all[skip..].to_vec()))?;

        for l in 0..config.layers {
            let p = format!("layer{l}");
            linear_params(&mut set, &format!("{p}.pe"), c, c, &mut rng)?;
            for block in ["instance_attn", "point_attn"] {
                for proj in ["q", "k", "v", "o"] {
                    linear_params(&mut set, &format!("{p}.{block}.{proj}"), c, c, &mut rng)?;
                }
            }
            MsdaParams::init(config.attention(), &mut rng)?.insert_into(&format!("{p}.cross"), &mut set)?;
            set.insert(format!("{p}.ffn.w1"), normal(&[c, f], INIT_SD, &mut rng))?;
            set.insert(format!("{p}.ffn.b1"), Tensor::zeros(&[f]))?;
            set.insert(format!("{p}.ffn.w2"), normal(&[f, c], INIT_SD, &mut rng))?;
            set.insert(format!("{p}.ffn.b2"), Tensor::zeros(&[c]))?;
            linear_params(&mut set, &format!("{p}.cls"), c, ClassId::COUNT, &mut rng)?;
            set.insert(format!("{p}.reg.w1"), normal(&[c, c], INIT_SD, &mut rng))?;
            set.insert(format!("{p}.reg.b1"), Tensor::zeros(&[c]))?;
            set.insert(format!("{p}.reg.w2"), Tensor::zeros(&[c, 2]))?;
            set.insert(format!("{p}.reg.b2"), Tensor::zeros(&[2]))?;
        }
        linear_params(&mut set, "embed", c, config.embed_dim, &mut rng)?;
        Ok(Self { config, mode, params: set })
    }

    /// Checks that `params` holds exactly the tensors this configuration
    /// needs, with the right shapes.
    pub fn from_params(config: DecoderConfig, mode: PriorMode, params: ParamSet) -> Result<Self> {
        let reference = Self::init(config, mode, 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, configuration needs {}",
                params.len(),
                reference.params.len()
            )));
        }
        for (name, t) in reference.params.iter() {
            let got = params.get(name).map_err(|_| Error::Config(format!("checkpoint lacks {name}")))?;
            if got.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "checkpoint {name} has shape {:?}, configuration needs {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Self { config, mode, params })
    }

    /// Evaluates every layer without recording gradients.
    pub fn forward(&self, bank: Option<&PriorBank>, pyramid: &FeaturePyramid) -> Result<Vec<LayerOutput>> {
        let mut tape = Tape::inference();
        let bound = self.params.bind_constant(&mut tape);
        let pv = PyramidVars::constant(&mut tape, pyramid);
        let (refs, origin) = init_reference_points(&mut tape, &self.config, self.mode, bank, &bound)?;
        let nodes = decode(&mut tape, &self.config, &bound, &pv, refs)?;
        let (ni, np, c) = (self.config.num_instances, self.config.num_points, self.config.channels);
        nodes
            .iter()
            .map(|n| {
                let pts = tape.value(n.points).clone().reshaped(vec![ni, np, 2])?;
                Ok(LayerOutput {
                    class_logits: tape.value(n.logits).clone(),
                    point_coords: pts.clone(),
                    refined_reference: ReferencePointSet { coords: pts, origin: origin.clone() },
                    query_state: tape.value(n.state).clone().reshaped(vec![ni, np, c])?,
                })
            })
            .collect()
    }
}

/// Layer-0 reference points `[N_I·N_P, 2]` on the tape.
///
/// Prior rows are constants copied from the bank; learnable rows are the
/// sigmoid of `reference.logits` and carry gradient.
pub fn init_reference_points(
    tape: &mut Tape,
    cfg: &DecoderConfig,
    mode: PriorMode,
    bank: Option<&PriorBank>,
    bound: &Bound,
) -> Result<(Var, Vec<Origin>)> {
    let (ni, np) = (cfg.num_instances, cfg.num_points);
    let nl = cfg.num_learnable(mode);
    let npri = ni - nl;
    let logits = bound.get("reference.logits")?;
    let logits = tape.reshape(logits, &[nl * np, 2])?;
    let learn = tape.sigmoid(logits)?;
    let mut origin = vec![Origin::Prior; npri];
    origin.extend(std::iter::repeat_n(Origin::Learnable, nl));
    if npri == 0 {
        return Ok((learn, origin));
    }
    let bank = bank.ok_or_else(|| Error::contract("init_reference_points", "prior mode needs a prior bank"))?;
    if bank.n_pri != npri || bank.n_p != np || bank.priors.len() != npri {
        return Err(Error::contract(
            "init_reference_points",
            format!("bank holds {}×{} points, decoder expects {npri}×{np}", bank.n_pri, bank.n_p),
        ));
    }
    let rows: Vec<f64> = bank.priors.iter().flat_map(|p| p.points.iter().flat_map(|q| [q[0], q[1]])).collect();
    let prior = tape.constant(Tensor::from_parts(vec![npri * np, 2], rows));
    if nl == 0 {
        return Ok((prior, origin));
    }
    Ok((tape.concat(&[prior, learn], 0)?, origin))
}

/// `q[i, p] = q_ins[i] + q_pts[p]`, flattened to `[N_I·N_P, C]`.
pub fn assemble_queries(tape: &mut Tape, q_ins: Var, q_pts: Var) -> Result<Var> {
    let (si, sp) = (tape.shape(q_ins).to_vec(), tape.shape(q_pts).to_vec());
    if si.len() != 2 || sp.len() != 2 || si[1] != sp[1] {
        return Err(Error::contract("assemble_queries", format!("cannot broadcast {si:?} with {sp:?}")));
    }
    let (ni, np, c) = (si[0], sp[0], si[1]);
    let a = tape.reshape(q_ins, &[ni, 1, c])?;
    let a = tape.expand(a, 1, np)?;
    let b = tape.reshape(q_pts, &[1, np, c])?;
    let b = tape.expand(b, 0, ni)?;
    let q = tape.add(a, b)?;
    tape.reshape(q, &[ni * np, c])
}

fn linear(tape: &mut Tape, bound: &Bound, name: &str, x: Var) -> Result<Var> {
    let (w, b) = (bound.get(&format!("{name}.w"))?, bound.get(&format!("{name}.b"))?);
    tape.linear(x, w, b)
}

/// Multi-head attention within each of `batch` groups of `tokens` rows.
/// `qk` feeds queries and keys, `v` the values; both are `[batch·tokens, C]`.
#[allow(clippy::too_many_arguments)]
fn grouped_attention(
    tape: &mut Tape,
    bound: &Bound,
    name: &str,
    heads: usize,
    qk: Var,
    v: Var,
    batch: usize,
    tokens: usize,
) -> Result<Var> {
    let c = tape.shape(qk)[1];
    let d = c / heads;
    let split = |tape: &mut Tape, proj: &str, x: Var| -> Result<Var> {
        let y = linear(tape, bound, &format!("{name}.{proj}"), x)?;
        let y = tape.reshape(y, &[batch, tokens, heads, d])?;
        let y = tape.permute(y, &[0, 2, 1, 3])?;
        tape.reshape(y, &[batch * heads, tokens, d])
    };
    let q = split(tape, "q", qk)?;
    let k = split(tape, "k", qk)?;
    let vv = split(tape, "v", v)?;
    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let a = tape.softmax(scores, 2)?;
    let o = tape.bmm(a, vv, false)?;
    let o = tape.reshape(o, &[batch, heads, tokens, d])?;
    let o = tape.permute(o, &[0, 2, 1, 3])?;
    let o = tape.reshape(o, &[batch * tokens, c])?;
    linear(tape, bound, &format!("{name}.o"), o)
}

fn residual_norm(tape: &mut Tape, q: Var, update: Var) -> Result<Var> {
    let s = tape.add(q, update)?;
    tape.layer_norm(s)
}

fn check_finite(tape: &Tape, v: Var, stage: &str) -> Result<()> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { stage: stage.to_string() })
    }
}

/// One decoder layer: `q [N_I·N_P, C]` and references `[N_I·N_P, 2]` in,
/// class logits, refined points and the new state out.
pub fn decoder_layer(
    tape: &mut Tape,
    cfg: &DecoderConfig,
    bound: &Bound,
    layer: usize,
    pyramid: &PyramidVars,
    q: Var,
    refs: Var,
) -> Result<LayerNodes> {
    let (ni, np, c) = (cfg.num_instances, cfg.num_points, cfg.channels);
    let p = format!("layer{layer}");
    let stage = |s: &str| format!("layer {layer} {s}");

    let pe = tape.sinusoidal_pe(refs, c)?;
    let q_pos = linear(tape, bound, &format!("{p}.pe"), pe)?;

    // Instances attend to each other through their point-averaged tokens.
    let x = tape.add(q, q_pos)?;
    let x3 = tape.reshape(x, &[ni, np, c])?;
    let xi = tape.mean_axis(x3, 1)?;
    let q3 = tape.reshape(q, &[ni, np, c])?;
    let vi = tape.mean_axis(q3, 1)?;
    let o = grouped_attention(tape, bound, &format!("{p}.instance_attn"), cfg.self_heads, xi, vi, 1, ni)?;
    let o = tape.reshape(o, &[ni, 1, c])?;
    let o = tape.expand(o, 1, np)?;
    let o = tape.reshape(o, &[ni * np, c])?;
    let q = residual_norm(tape, q, o)?;
    check_finite(tape, q, &stage("instance self-attention"))?;

    let x = tape.add(q, q_pos)?;
    let o = grouped_attention(tape, bound, &format!("{p}.point_attn"), cfg.self_heads, x, q, ni, np)?;
    let q = residual_norm(tape, q, o)?;
    check_finite(tape, q, &stage("point self-attention"))?;

    let x = tape.add(q, q_pos)?;
    let cross = MsdaParams::from_bound(cfg.attention(), &format!("{p}.cross"), bound)?;
    let o = msda(tape, &cross, x, pyramid, refs)?.output;
    let q = residual_norm(tape, q, o)?;
    check_finite(tape, q, &stage("cross-attention"))?;

    let (w1, b1) = (bound.get(&format!("{p}.ffn.w1"))?, bound.get(&format!("{p}.ffn.b1"))?);
    let h = tape.linear(q, w1, b1)?;
    let h = tape.relu(h)?;
    let (w2, b2) = (bound.get(&format!("{p}.ffn.w2"))?, bound.get(&format!("{p}.ffn.b2"))?);
    let o = tape.linear(h, w2, b2)?;
    let q = residual_norm(tape, q, o)?;
    check_finite(tape, q, &stage("feed-forward"))?;

    let q3 = tape.reshape(q, &[ni, np, c])?;
    let pooled = tape.mean_axis(q3, 1)?;
    let logits = linear(tape, bound, &format!("{p}.cls"), pooled)?;

    let (w1, b1) = (bound.get(&format!("{p}.reg.w1"))?, bound.get(&format!("{p}.reg.b1"))?);
    let h = tape.linear(q, w1, b1)?;
    let h = tape.relu(h)?;
    let (w2, b2) = (bound.get(&format!("{p}.reg.w2"))?, bound.get(&format!("{p}.reg.b2"))?);
    let off = tape.linear(h, w2, b2)?;
    let base = tape.inv_sigmoid(refs)?;
    let z = tape.add(base, off)?;
    let points = tape.sigmoid(z)?;
    check_finite(tape, points, &stage("regression head"))?;
    check_finite(tape, logits, &stage("classification head"))?;
    Ok(LayerNodes { logits, points, state: q })
}

/// Per-cell embeddings `[H·W, E]` of the finest pyramid level, read by the
/// discriminative loss.
pub fn cell_embeddings(tape: &mut Tape, bound: &Bound, pyramid: &PyramidVars) -> Result<Var> {
    let (h, w) = pyramid.dims[0];
    let c = tape.shape(pyramid.levels[0])[2];
    let cells = tape.reshape(pyramid.levels[0], &[h * w, c])?;
    linear(tape, bound, "embed", cells)
}

/// Runs all layers from layer-0 references `refs`; references passed to
/// later layers are detached.
pub fn decode(
    tape: &mut Tape,
    cfg: &DecoderConfig,
    bound: &Bound,
    pyramid: &PyramidVars,
    refs: Var,
) -> Result<Vec<LayerNodes>> {
    run_layers(tape, cfg, bound, pyramid, refs, None)
}

/// [`decode`] with the references of layers `1..L` pinned to `later`
/// instead of taken from the previous layer. Passing the detached values of
/// an earlier pass gives the same gradients as [`decode`] while making the
/// objective an ordinary function of the parameters, which is what finite
/// differences need.
pub fn decode_pinned(
    tape: &mut Tape,
    cfg: &DecoderConfig,
    bound: &Bound,
    pyramid: &PyramidVars,
    refs: Var,
    later: &[Tensor],
) -> Result<Vec<LayerNodes>> {
    if later.len() + 1 != cfg.layers {
        return Err(Error::contract(
            "decode_pinned",
            format!("{} pinned references for {} layers", later.len(), cfg.layers),
        ));
    }
    run_layers(tape, cfg, bound, pyramid, refs, Some(later))
}

fn run_layers(
    tape: &mut Tape,
    cfg: &DecoderConfig,
    bound: &Bound,
    pyramid: &PyramidVars,
    refs: Var,
    later: Option<&[Tensor]>,
) -> Result<Vec<LayerNodes>> {
    if pyramid.levels.len() != cfg.levels {
        return Err(Error::contract(
            "decode",
            format!("pyramid has {} levels, decoder expects {}", pyramid.levels.len(), cfg.levels),
        ));
    }
    let (qi, qp) = (bound.get("query.instance")?, bound.get("query.point")?);
    let mut q = assemble_queries(tape, qi, qp)?;
    let mut r = refs;
    let mut out = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let nodes = decoder_layer(tape, cfg, bound, l, pyramid, q, r)?;
        q = nodes.state;
        r = match later {
            Some(pinned) if l + 1 < cfg.layers => tape.constant(pinned[l].clone()),
            _ => tape.detach(nodes.points),
        };
        out.push(nodes);
    }
    Ok(out)
}
