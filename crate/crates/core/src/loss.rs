//! Training objectives: per-layer set-prediction loss and the
//! discriminative embedding loss over the BEV grid.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::decoder::LayerNodes;
use crate::error::{Error, Result};
use crate::geometry::MapElement;
use crate::matching::Assignment;
use crate::synth::InstanceMask;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the pull term.
    pub lambda_var: f64,
    /// Weight of the push term.
    pub lambda_dist: f64,
    pub delta_v: f64,
    pub delta_d: f64,
    pub cls_weight: f64,
    pub pts_weight: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_var: 1.0,
            lambda_dist: 1.0,
            delta_v: 0.5,
            delta_d: 3.0,
            cls_weight: 2.0,
            pts_weight: 5.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let weights =
            [self.lambda_var, self.lambda_dist, self.cls_weight, self.pts_weight, self.focal_gamma, self.delta_v];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        if self.delta_d <= 2.0 * self.delta_v {
            return Err(Error::Config(format!(
                "delta_d={} must exceed 2·delta_v={}",
                self.delta_d,
                2.0 * self.delta_v
            )));
        }
        Ok(())
    }
}

/// Tape nodes of the discriminative loss.
#[derive(Clone, Copy, Debug)]
pub struct DiscNodes {
    /// `λ₁·var + λ₂·dist`
    pub total: Var,
    pub var: Var,
    pub dist: Var,
}

fn scalar_cat(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    let flat: Vec<Var> = parts.iter().map(|&v| tape.reshape(v, &[1])).collect::<Result<_>>()?;
    tape.concat(&flat, 0)
}

/// Discriminative loss of per-cell embeddings `E×H×W` under `mask`.
pub fn discriminative_loss(
    tape: &mut Tape,
    embeddings: Var,
    mask: &InstanceMask,
    cfg: &LossConfig,
) -> Result<DiscNodes> {
    let s = tape.shape(embeddings).to_vec();
    if s.len() != 3 || s[1] != mask.h || s[2] != mask.w {
        return Err(Error::contract(
            "discriminative_loss",
            format!("embeddings {s:?} do not match a {}×{} mask", mask.h, mask.w),
        ));
    }
    let flat = tape.reshape(embeddings, &[s[0], s[1] * s[2]])?;
    let rows = tape.transpose(flat)?;
    discriminative_loss_rows(tape, rows, mask, cfg)
}

/// [`discriminative_loss`] over cell-major embeddings `[H·W, E]`.
pub fn discriminative_loss_rows(
    tape: &mut Tape,
    rows: Var,
    mask: &InstanceMask,
    cfg: &LossConfig,
) -> Result<DiscNodes> {
    let s = tape.shape(rows).to_vec();
    if s.len() != 2 || s[0] != mask.h * mask.w {
        return Err(Error::contract(
            "discriminative_loss",
            format!("embeddings {s:?} do not cover a {}×{} mask", mask.h, mask.w),
        ));
    }
    let e = s[1];
    let mut cells: Vec<Vec<usize>> = vec![Vec::new(); mask.k + 1];
    for (i, &id) in mask.ids.iter().enumerate() {
        if id as usize > mask.k {
            return Err(Error::contract("discriminative_loss", format!("cell id {id} exceeds K={}", mask.k)));
        }
        if id > 0 {
            cells[id as usize].push(i);
        }
    }
    let mut means = Vec::new();
    let mut pulls = Vec::new();
    for idx in cells.into_iter().filter(|c| !c.is_empty()) {
        let p = idx.len();
        let x = tape.gather(rows, idx)?;
        let mu = tape.mean_axis(x, 0)?;
        let mu = tape.reshape(mu, &[1, e])?;
        means.push(mu);
        let spread = tape.expand(mu, 0, p)?;
        let d = tape.sub(spread, x)?;
        let n = tape.norm(d)?;
        let h = tape.affine(n, 1.0, -cfg.delta_v)?;
        let h = tape.squared_hinge(h)?;
        pulls.push(tape.mean(h)?);
    }
    let k = means.len();
    let zero = || Tensor::scalar(0.0);
    let var = if k == 0 {
        tape.constant(zero())
    } else {
        let all = scalar_cat(tape, &pulls)?;
        tape.mean(all)?
    };
    let dist = if k < 2 {
        tape.constant(zero())
    } else {
        let mu = tape.concat(&means, 0)?;
        let a = tape.reshape(mu, &[k, 1, e])?;
        let a = tape.expand(a, 1, k)?;
        let b = tape.reshape(mu, &[1, k, e])?;
        let b = tape.expand(b, 0, k)?;
        let diff = tape.sub(a, b)?;
        let d = tape.norm(diff)?;
        let d = tape.reshape(d, &[k * k])?;
        let off: Vec<usize> = (0..k * k).filter(|i| i / k != i % k).collect();
        let d = tape.gather(d, off)?;
        let h = tape.affine(d, -1.0, cfg.delta_d)?;
        let h = tape.squared_hinge(h)?;
        let s = tape.sum(h)?;
        tape.scale(s, 1.0 / (k * (k - 1)) as f64)?
    };
    let wv = tape.scale(var, cfg.lambda_var)?;
    let wd = tape.scale(dist, cfg.lambda_dist)?;
    let total = tape.add(wv, wd)?;
    Ok(DiscNodes { total, var, dist })
}

/// Loss values of one evaluation, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Weighted classification loss summed over layers.
    pub cls: f64,
    /// Weighted point loss summed over layers.
    pub pts: f64,
    /// Weighted discriminative loss.
    pub disc: f64,
    pub var: f64,
    pub dist: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: Var,
    pub cls: Var,
    pub pts: Var,
    pub disc: DiscNodes,
}

impl LossNodes {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let v = |x: Var| tape.value(x).item();
        LossBreakdown {
            total: v(self.total),
            cls: v(self.cls),
            pts: v(self.pts),
            disc: v(self.disc.total),
            var: v(self.disc.var),
            dist: v(self.disc.dist),
        }
    }
}

/// Classification and point loss of one layer against its assignment.
///
/// The focal loss covers every query (unmatched ones target background)
/// and is normalized by the GT count; the point loss is the mean over
/// matched pairs of the mean per-point `|dx| + |dy|` under the matched
/// ordering. `gts` are normalized and resampled to the decoder's `N_P`.
pub fn layer_loss(
    tape: &mut Tape,
    layer: &LayerNodes,
    assignment: &Assignment,
    gts: &[MapElement],
    cfg: &LossConfig,
) -> Result<(Var, Var)> {
    let ls = tape.shape(layer.logits).to_vec();
    let (ni, nc) = (ls[0], ls[1]);
    let np = tape.shape(layer.points)[0] / ni;
    if assignment.num_gt != gts.len() || assignment.num_queries != ni {
        return Err(Error::contract(
            "layer_loss",
            format!(
                "assignment covers {}×{}, layer has {} GTs and {} queries",
                assignment.num_gt,
                assignment.num_queries,
                gts.len(),
                ni
            ),
        ));
    }
    let mut targets = vec![0.0; ni * nc];
    for p in &assignment.pairs {
        targets[p.query * nc + gts[p.gt].class_id.index()] = 1.0;
    }
    let t = tape.constant(Tensor::from_parts(vec![ni, nc], targets));
    let focal = tape.sigmoid_focal(layer.logits, t, cfg.focal_alpha, cfg.focal_gamma)?;
    let focal = tape.sum(focal)?;
    let cls = tape.scale(focal, cfg.cls_weight / gts.len().max(1) as f64)?;

    let pts = if assignment.pairs.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let mut idx = Vec::with_capacity(assignment.pairs.len() * np);
        let mut target = Vec::with_capacity(assignment.pairs.len() * np * 2);
        for p in &assignment.pairs {
            let gt = &gts[p.gt];
            if gt.points.len() != np {
                return Err(Error::contract("layer_loss", format!("GT has {} points, decoder {np}", gt.points.len())));
            }
            let order = &gt.orderings()[p.ordering];
            for (k, &j) in order.iter().enumerate() {
                idx.push(p.query * np + k);
                target.extend_from_slice(&gt.points[j]);
            }
        }
        let n = idx.len();
        let pred = tape.gather(layer.points, idx)?;
        let tgt = tape.constant(Tensor::from_parts(vec![n, 2], target));
        let d = tape.sub(pred, tgt)?;
        let d = tape.abs(d)?;
        let m = tape.mean(d)?;
        tape.scale(m, 2.0 * cfg.pts_weight)?
    };
    Ok((cls, pts))
}

/// Sum over layers of the set-prediction loss plus the discriminative term
/// on `embeddings` (cell-major `[H·W, E]`).
pub fn total_loss(
    tape: &mut Tape,
    layers: &[LayerNodes],
    assignments: &[Assignment],
    gts: &[MapElement],
    embeddings: Var,
    mask: &InstanceMask,
    cfg: &LossConfig,
) -> Result<LossNodes> {
    if layers.len() != assignments.len() || layers.is_empty() {
        return Err(Error::contract(
            "total_loss",
            format!("{} layers with {} assignments", layers.len(), assignments.len()),
        ));
    }
    let mut cls_parts = Vec::with_capacity(layers.len());
    let mut pts_parts = Vec::with_capacity(layers.len());
    for (layer, a) in layers.iter().zip(assignments) {
        let (c, p) = layer_loss(tape, layer, a, gts, cfg)?;
        cls_parts.push(c);
        pts_parts.push(p);
    }
    let c = scalar_cat(tape, &cls_parts)?;
    let cls = tape.sum(c)?;
    let p = scalar_cat(tape, &pts_parts)?;
    let pts = tape.sum(p)?;
    let disc = discriminative_loss_rows(tape, embeddings, mask, cfg)?;
    let s = tape.add(cls, pts)?;
    let total = tape.add(s, disc.total)?;
    Ok(LossNodes { total, cls, pts, disc })
}
