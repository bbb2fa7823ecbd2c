//! Chamfer-distance average precision per class and its mean.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::LayerOutput;
use crate::error::{Error, Result};
use crate::geometry::{chamfer, denormalize, BevExtent, ClassId, MapElement};

/// Chamfer thresholds in meters.
pub const THRESHOLDS: [f64; 3] = [0.5, 1.0, 1.5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub element: MapElement,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    /// Predictions and GTs are resampled to this many points before the
    /// Chamfer distance; 0 keeps them as given.
    pub resample_points: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { thresholds: THRESHOLDS.to_vec(), resample_points: 100 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() || self.thresholds.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::Config("eval: thresholds must be a non-empty list of positive distances".into()));
        }
        if self.resample_points == 1 {
            return Err(Error::Config("eval: resample_points must be 0 or at least 2".into()));
        }
        Ok(())
    }
}

/// Outcome of greedy matching at one threshold: `(score, is_tp)` per
/// prediction in ranking order, plus the GT count.
struct Ranked {
    hits: Vec<(f64, bool)>,
    num_gt: usize,
}

/// Greedy matching of one scene's predictions in descending confidence;
/// each takes its nearest unmatched GT if that is within `tau`.
fn match_scene(preds: &[Prediction], gts: &[MapElement], tau: f64, out: &mut Vec<(f64, bool)>) -> Result<()> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    for i in order {
        let p = &preds[i];
        let mut best: Option<(f64, usize)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let d = chamfer(&p.element.points, &g.points)?;
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, j));
            }
        }
        let tp = match best {
            Some((d, j)) if d <= tau => {
                taken[j] = true;
                true
            }
            _ => false,
        };
        out.push((p.score, tp));
    }
    Ok(())
}

fn rank(scenes: &[(&[Prediction], &[MapElement])], tau: f64) -> Result<Ranked> {
    let mut hits = Vec::new();
    let mut num_gt = 0;
    for (preds, gts) in scenes {
        match_scene(preds, gts, tau, &mut hits)?;
        num_gt += gts.len();
    }
    // Stable: equal scores keep scene order.
    hits.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(Ranked { hits, num_gt })
}

/// Area under the precision-recall curve with the precision envelope made
/// non-increasing, over every operating point of the ranking.
fn average_precision(r: &Ranked) -> f64 {
    if r.num_gt == 0 {
        return if r.hits.is_empty() { 1.0 } else { 0.0 };
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(r.hits.len());
    for (i, &(_, hit)) in r.hits.iter().enumerate() {
        tp += hit as usize;
        points.push((tp as f64 / r.num_gt as f64, tp as f64 / (i + 1) as f64));
    }
    let mut envelope = 0.0;
    for p in points.iter_mut().rev() {
        envelope = f64::max(envelope, p.1);
        p.1 = envelope;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in points {
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// AP of class-homogeneous `preds` against `gts` at Chamfer threshold
/// `tau`. No GT and no prediction gives 1; GTs without predictions give 0.
pub fn ap_at_threshold(preds: &[Prediction], gts: &[MapElement], tau: f64) -> Result<f64> {
    Ok(average_precision(&rank(&[(preds, gts)], tau)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub threshold: f64,
    pub ap: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub class: ClassId,
    pub num_gt: usize,
    pub num_pred: usize,
    pub per_threshold: Vec<ThresholdResult>,
    pub mean_ap: f64,
    /// False when the class has no GT in any scene and is left out of mAP.
    pub in_map: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub note: String,
    pub thresholds: Vec<f64>,
    pub num_scenes: usize,
    pub classes: Vec<ClassResult>,
    pub map: f64,
}

const REPORT_NOTE: &str = "AP: greedy confidence-ordered matching to the nearest unmatched GT by Chamfer distance, \
all-point interpolation with a non-increasing precision envelope; mAP averages classes with at least one GT";

fn dense(e: &MapElement, n: usize) -> Result<MapElement> {
    if n == 0 {
        Ok(e.clone())
    } else {
        e.resampled(n)
    }
}

/// Pools scene-aligned predictions and GTs (meters) per class and
/// evaluates every threshold.
pub fn evaluate(preds: &[Vec<Prediction>], gts: &[Vec<MapElement>], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if preds.len() != gts.len() {
        return Err(Error::contract("evaluate", format!("{} prediction lists for {} scenes", preds.len(), gts.len())));
    }
    let mut classes = Vec::with_capacity(ClassId::COUNT);
    for class in ClassId::ALL {
        let mut scenes: Vec<(Vec<Prediction>, Vec<MapElement>)> = Vec::with_capacity(gts.len());
        for (p, g) in preds.iter().zip(gts) {
            let p = p
                .iter()
                .filter(|p| p.element.class_id == class)
                .map(|p| Ok(Prediction { element: dense(&p.element, cfg.resample_points)?, score: p.score }))
                .collect::<Result<Vec<_>>>()?;
            let g = g
                .iter()
                .filter(|g| g.class_id == class)
                .map(|g| dense(g, cfg.resample_points))
                .collect::<Result<Vec<_>>>()?;
            scenes.push((p, g));
        }
        let refs: Vec<(&[Prediction], &[MapElement])> = scenes.iter().map(|(p, g)| (&p[..], &g[..])).collect();
        let mut per_threshold = Vec::with_capacity(cfg.thresholds.len());
        for &tau in &cfg.thresholds {
            let ranked = rank(&refs, tau)?;
            let tp = ranked.hits.iter().filter(|h| h.1).count();
            per_threshold.push(ThresholdResult {
                threshold: tau,
                ap: average_precision(&ranked),
                tp,
                fp: ranked.hits.len() - tp,
                fn_: ranked.num_gt - tp,
            });
        }
        let num_gt = scenes.iter().map(|s| s.1.len()).sum();
        classes.push(ClassResult {
            class,
            num_gt,
            num_pred: scenes.iter().map(|s| s.0.len()).sum(),
            mean_ap: per_threshold.iter().map(|t| t.ap).sum::<f64>() / per_threshold.len() as f64,
            per_threshold,
            in_map: num_gt > 0,
        });
    }
    let used: Vec<f64> = classes.iter().filter(|c| c.in_map).map(|c| c.mean_ap).collect();
    let map = if used.is_empty() { 0.0 } else { used.iter().sum::<f64>() / used.len() as f64 };
    Ok(EvalReport { note: REPORT_NOTE.into(), thresholds: cfg.thresholds.clone(), num_scenes: gts.len(), classes, map })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Class × threshold table, one row per pair.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,threshold,ap,tp,fp,fn,in_map\n");
        for c in &self.classes {
            for t in &c.per_threshold {
                let _ =
                    writeln!(s, "{},{},{},{},{},{},{}", c.class.name(), t.threshold, t.ap, t.tp, t.fp, t.fn_, c.in_map);
            }
        }
        s
    }

    /// Writes `<stem>.json` and `<stem>.csv` under `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (ext, text) in [("json", self.to_json()), ("csv", self.to_csv())] {
            let path = dir.join(format!("{stem}.{ext}"));
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Predictions of one decoder layer: every instance becomes one element of
/// its highest-scoring class, scored by that class's sigmoid probability.
pub fn predictions_from_layer(out: &LayerOutput, extent: &BevExtent) -> Result<Vec<Prediction>> {
    let nc = out.class_logits.shape()[1];
    let np = out.point_coords.shape()[1];
    out.class_logits
        .data()
        .chunks(nc)
        .zip(out.point_coords.data().chunks(2 * np))
        .map(|(logits, pts)| {
            let (arg, best) =
                logits
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            let class = ClassId::from_index(arg).expect("three class logits");
            let unit: Vec<[f64; 2]> = pts.chunks(2).map(|p| [p[0], p[1]]).collect();
            Ok(Prediction {
                element: MapElement::new(class, denormalize(&unit, extent)?),
                score: 1.0 / (1.0 + (-best).exp()),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ElementKind, Point};
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn line(points: Vec<Point>) -> MapElement {
        MapElement { class_id: ClassId::Divider, kind: ElementKind::Polyline, points }
    }

    fn pred(points: Vec<Point>, score: f64) -> Prediction {
        Prediction { element: line(points), score }
    }

    /// Independent oracle: explicit TP flags by a direct scan, then for each
    /// recall level the best precision at any operating point reaching it.
    fn oracle(preds: &[Prediction], gts: &[MapElement], tau: f64) -> f64 {
        if gts.is_empty() {
            return if preds.is_empty() { 1.0 } else { 0.0 };
        }
        let mut idx: Vec<usize> = (0..preds.len()).collect();
        idx.sort_by(|&a, &b| preds[b].score.partial_cmp(&preds[a].score).unwrap().then(a.cmp(&b)));
        let mut free: Vec<bool> = vec![true; gts.len()];
        let mut flags = Vec::new();
        for &i in &idx {
            let dists: Vec<f64> = gts.iter().map(|g| chamfer(&preds[i].element.points, &g.points).unwrap()).collect();
            let j = (0..gts.len())
                .filter(|&j| free[j])
                .min_by(|&a, &b| dists[a].partial_cmp(&dists[b]).unwrap().then(a.cmp(&b)));
            let hit = matches!(j, Some(j) if dists[j] <= tau);
            if hit {
                free[j.unwrap()] = false;
            }
            flags.push(hit);
        }
        let ops: Vec<(usize, f64)> = (1..=flags.len())
            .map(|k| {
                let tp = flags[..k].iter().filter(|&&f| f).count();
                (tp, tp as f64 / k as f64)
            })
            .collect();
        let mut ap = 0.0;
        for level in 1..=gts.len() {
            let best = ops.iter().filter(|o| o.0 >= level).map(|o| o.1).fold(0.0, f64::max);
            ap += best / gts.len() as f64;
        }
        ap
    }

    #[test]
    fn single_close_prediction_is_perfect() {
        let gt = line(vec![[0.0, 0.0], [10.0, 0.0]]);
        let p = pred(vec![[0.0, 0.4], [10.0, 0.4]], 0.9);
        assert_eq!(ap_at_threshold(std::slice::from_ref(&p), std::slice::from_ref(&gt), 0.5).unwrap(), 1.0);
        assert_eq!(ap_at_threshold(&[p], std::slice::from_ref(&gt), 0.3).unwrap(), 0.0);
        assert_eq!(ap_at_threshold(&[], &[gt], 0.5).unwrap(), 0.0);
        assert_eq!(ap_at_threshold(&[], &[], 0.5).unwrap(), 1.0);
    }

    #[test]
    fn mixed_three_predictions_two_gts() {
        let g = vec![line(vec![[0.0, 0.0], [10.0, 0.0]]), line(vec![[0.0, 5.0], [10.0, 5.0]])];
        let p = vec![
            pred(vec![[0.0, 0.2], [10.0, 0.2]], 0.9),
            pred(vec![[0.0, 9.0], [10.0, 9.0]], 0.8),
            pred(vec![[0.0, 4.0], [10.0, 4.0]], 0.7),
        ];
        // TP, FP, TP at τ = 1.5: recall 1/2 at precision 1, recall 1 at 2/3.
        let ap = ap_at_threshold(&p, &g, 1.5).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        assert!((ap - oracle(&p, &g, 1.5)).abs() < 1e-12);
    }

    fn random_case(seed: u64) -> (Vec<Prediction>, Vec<MapElement>) {
        let mut r = rng::stream(seed, "ap");
        let shape = |r: &mut rand_chacha::ChaCha8Rng| -> Vec<Point> {
            let (x, y) = (r.gen_range(0.0..6.0), r.gen_range(0.0..6.0));
            vec![[x, y], [x + r.gen_range(-1.0..1.0), y + 2.0]]
        };
        let gts: Vec<MapElement> = (0..r.gen_range(0..=4)).map(|_| line(shape(&mut r))).collect();
        let preds = (0..r.gen_range(0..=5))
            .map(|_| {
                let pts = if !gts.is_empty() && r.gen_bool(0.6) {
                    let g = &gts[r.gen_range(0..gts.len())];
                    g.points.iter().map(|p| [p[0] + r.gen_range(-1.0..1.0), p[1] + r.gen_range(-1.0..1.0)]).collect()
                } else {
                    shape(&mut r)
                };
                pred(pts, r.gen_range(0.0..1.0))
            })
            .collect();
        (preds, gts)
    }

    #[test]
    fn agrees_with_the_oracle() {
        for seed in 0..200 {
            let (p, g) = random_case(seed);
            for tau in THRESHOLDS {
                let a = ap_at_threshold(&p, &g, tau).unwrap();
                assert!((a - oracle(&p, &g, tau)).abs() <= 1e-12, "seed {seed} τ {tau}");
            }
        }
    }

    proptest! {
        #[test]
        fn ap_properties(seed in any::<u64>(), factor in 0.01f64..100.0) {
            let (p, g) = random_case(seed);
            let strict = ap_at_threshold(&p, &g, 0.5).unwrap();
            let loose = ap_at_threshold(&p, &g, 1.5).unwrap();
            prop_assert!(loose >= strict - 1e-15);
            prop_assert!((0.0..=1.0).contains(&loose));
            let scaled: Vec<Prediction> = p.iter().map(|q| Prediction { score: q.score * factor, ..q.clone() }).collect();
            prop_assert_eq!(ap_at_threshold(&scaled, &g, 1.0).unwrap(), ap_at_threshold(&p, &g, 1.0).unwrap());
        }

        #[test]
        fn duplicates_never_help(seed in any::<u64>(), which in 0usize..5) {
            let (p, g) = random_case(seed);
            prop_assume!(!p.is_empty());
            let original = &p[which % p.len()];
            let mut dup = p.clone();
            dup.push(original.clone());
            for tau in THRESHOLDS {
                // With a single GT in reach, the original or an earlier
                // prediction holds it by the time the duplicate is ranked.
                let near = g.iter().filter(|e| chamfer(&original.element.points, &e.points).unwrap() <= tau).count();
                if near == 1 {
                    prop_assert!(ap_at_threshold(&dup, &g, tau).unwrap() <= ap_at_threshold(&p, &g, tau).unwrap());
                }
            }
        }
    }

    #[test]
    fn perfect_predictions_score_one_and_empty_classes_are_excluded() {
        let gts = vec![
            vec![line(vec![[0.0, 0.0], [10.0, 0.0]]), MapElement::new(ClassId::Boundary, vec![[0.0, 3.0], [9.0, 3.0]])],
            vec![line(vec![[0.0, 5.0], [10.0, 6.0]])],
        ];
        let preds: Vec<Vec<Prediction>> =
            gts.iter().map(|s| s.iter().map(|g| Prediction { element: g.clone(), score: 1.0 }).collect()).collect();
        let r = evaluate(&preds, &gts, &EvalConfig::default()).unwrap();
        assert_eq!(r.map, 1.0);
        let ped = &r.classes[ClassId::PedCrossing.index()];
        assert!(!ped.in_map);
        assert_eq!(r.thresholds, THRESHOLDS.to_vec());
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 1 + 3 * 3);
        assert!(csv.starts_with("class,threshold,ap,tp,fp,fn,in_map\n"));
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert!(evaluate(&preds[..1], &gts, &EvalConfig::default()).is_err());
    }
}
