//! Bipartite matching of decoder queries to ground-truth elements and the
//! per-layer match-stability scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{MapElement, Point};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    pub lambda_cls: f64,
    pub lambda_pts: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self { lambda_cls: 2.0, lambda_pts: 5.0, focal_alpha: 0.25, focal_gamma: 2.0 }
    }
}

impl CostConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.lambda_cls, self.lambda_pts, self.focal_gamma].iter().all(|v| v.is_finite() && *v >= 0.0)
            && (0.0..=1.0).contains(&self.focal_alpha);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("matching cost weights must be non-negative: {self:?}")))
        }
    }
}

/// One matched pair. `ordering` indexes `gt.orderings()` and names the
/// point order the prediction was compared against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchPair {
    pub gt: usize,
    pub query: usize,
    pub ordering: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// Sorted by GT index.
    pub pairs: Vec<MatchPair>,
    /// Sum of the matched costs in GT order.
    pub total_cost: f64,
    pub num_gt: usize,
    pub num_queries: usize,
}

impl Assignment {
    /// Query matched to each GT, `None` where the GT went unmatched.
    pub fn query_of_gt(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.num_gt];
        for p in &self.pairs {
            out[p.gt] = Some(p.query);
        }
        out
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Focal class cost of predicting `logit` for the GT class: the focal
/// positive term minus the focal negative term.
pub fn focal_class_cost(logit: f64, cfg: &CostConfig) -> f64 {
    let p = 1.0 / (1.0 + (-logit).exp());
    let (log_p, log_q) = (-softplus(-logit), -softplus(logit));
    let pos = -cfg.focal_alpha * (1.0 - p).powf(cfg.focal_gamma) * log_p;
    let neg = -(1.0 - cfg.focal_alpha) * p.powf(cfg.focal_gamma) * log_q;
    pos - neg
}

/// Mean L1 distance between `pred` and `gt` taken in `order`.
pub fn ordered_l1(pred: &[Point], gt: &[Point], order: &[usize]) -> f64 {
    let s: f64 = pred.iter().zip(order).map(|(p, &j)| (p[0] - gt[j][0]).abs() + (p[1] - gt[j][1]).abs()).sum();
    s / pred.len() as f64
}

/// Cost of matching one query (`logits` over the classes, `points` in
/// normalized coordinates) to `gt` (also normalized), and the index of the
/// cheapest equivalent ordering.
pub fn pair_cost(logits: &[f64], points: &[Point], gt: &MapElement, cfg: &CostConfig) -> Result<(f64, usize)> {
    if points.len() != gt.points.len() || gt.class_id.index() >= logits.len() {
        return Err(Error::contract(
            "pair_cost",
            format!(
                "{} predicted points and {} logits against a {}-point {} element",
                points.len(),
                logits.len(),
                gt.points.len(),
                gt.class_id.name()
            ),
        ));
    }
    let (mut best, mut arg) = (f64::INFINITY, 0);
    for (k, order) in gt.orderings().iter().enumerate() {
        let d = ordered_l1(points, &gt.points, order);
        if d < best {
            best = d;
            arg = k;
        }
    }
    Ok((cfg.lambda_cls * focal_class_cost(logits[gt.class_id.index()], cfg) + cfg.lambda_pts * best, arg))
}

/// Row-major `GT × query` costs with the chosen ordering of every entry.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub cost: Vec<f64>,
    pub ordering: Vec<usize>,
}

impl CostMatrix {
    pub fn from_costs(rows: usize, cols: usize, cost: Vec<f64>) -> Result<Self> {
        if cost.len() != rows * cols {
            return Err(Error::contract("CostMatrix", format!("{} entries for {rows}×{cols}", cost.len())));
        }
        Ok(Self { rows, cols, ordering: vec![0; cost.len()], cost })
    }

    /// Costs of every GT against every query. `logits` is `N_I×3` and
    /// `points` holds `N_I` point lists, all normalized.
    pub fn build(logits: &[Vec<f64>], points: &[Vec<Point>], gts: &[MapElement], cfg: &CostConfig) -> Result<Self> {
        if logits.len() != points.len() {
            return Err(Error::contract("CostMatrix::build", "logit and point counts differ"));
        }
        let (rows, cols) = (gts.len(), points.len());
        let mut cost = Vec::with_capacity(rows * cols);
        let mut ordering = Vec::with_capacity(rows * cols);
        for gt in gts {
            for (l, p) in logits.iter().zip(points) {
                let (c, o) = pair_cost(l, p, gt, cfg)?;
                cost.push(c);
                ordering.push(o);
            }
        }
        Ok(Self { rows, cols, cost, ordering })
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.cost[r * self.cols + c]
    }
}

/// Minimum-cost assignment of `rows` to `cols` (`rows ≤ cols`) restricted to
/// the listed rows and columns; returns the column of each listed row and
/// the total. Shortest augmenting paths with potentials, `O(n²m)`.
fn solve(cm: &CostMatrix, rows: &[usize], cols: &[usize]) -> (Vec<usize>, f64) {
    let (n, m) = (rows.len(), cols.len());
    debug_assert!(n <= m);
    let a = |i: usize, j: usize| cm.at(rows[i - 1], cols[j - 1]);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            col_of[p[j] - 1] = j - 1;
        }
    }
    let total = col_of.iter().enumerate().map(|(i, &j)| cm.at(rows[i], cols[j])).sum();
    (col_of, total)
}

/// Optimal matching of size `min(|rows|, |cols|)` as `(row, col)` pairs
/// sorted by row, with its cost summed in row order.
fn optimum(cm: &CostMatrix, rows: &[usize], cols: &[usize]) -> (Vec<(usize, usize)>, f64) {
    if rows.is_empty() || cols.is_empty() {
        return (Vec::new(), 0.0);
    }
    let mut pairs: Vec<(usize, usize)> = if rows.len() <= cols.len() {
        let (col_of, _) = solve(cm, rows, cols);
        rows.iter().zip(col_of).map(|(&r, j)| (r, cols[j])).collect()
    } else {
        let t = CostMatrix {
            rows: cm.cols,
            cols: cm.rows,
            cost: (0..cm.cols).flat_map(|c| (0..cm.rows).map(move |r| cm.at(r, c))).collect(),
            ordering: Vec::new(),
        };
        let (row_of, _) = solve(&t, cols, rows);
        cols.iter().zip(row_of).map(|(&c, i)| (rows[i], c)).collect()
    };
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(r, c)| cm.at(r, c)).sum();
    (pairs, total)
}

/// Minimum-cost one-to-one assignment of `min(rows, cols)` pairs.
///
/// Among optimal assignments the lexicographically smallest pair list
/// (sorted by GT, compared as `(gt, query)` tuples) is returned. Totals
/// within `1e-12` relative of the optimum count as ties.
pub fn hungarian(cm: &CostMatrix) -> Result<Assignment> {
    if let Some(bad) = cm.cost.iter().position(|v| !v.is_finite()) {
        return Err(Error::contract(
            "hungarian",
            format!("non-finite cost {} at ({}, {})", cm.cost[bad], bad / cm.cols.max(1), bad % cm.cols.max(1)),
        ));
    }
    let all_rows: Vec<usize> = (0..cm.rows).collect();
    let all_cols: Vec<usize> = (0..cm.cols).collect();
    let (mut current, best) = optimum(cm, &all_rows, &all_cols);
    let scale: f64 = 1.0 + cm.cost.iter().map(|v| v.abs()).fold(0.0, f64::max) * cm.rows.min(cm.cols) as f64;
    let tol = 1e-12 * scale;
    let k = current.len();

    // Fix pairs one at a time, taking the smallest (gt, query) that still
    // admits an optimal completion.
    let mut fixed: Vec<(usize, usize)> = Vec::with_capacity(k);
    let mut fixed_cost = 0.0;
    let mut free_cols = all_cols;
    for g in 0..cm.rows {
        if fixed.len() == k {
            break;
        }
        let rest_rows: Vec<usize> = (g + 1..cm.rows).collect();
        let incumbent = current.iter().find(|p| p.0 == g).map(|p| p.1);
        let mut chosen = None;
        for &q in &free_cols {
            if Some(q) == incumbent {
                chosen = Some(q);
                break;
            }
            let cols: Vec<usize> = free_cols.iter().copied().filter(|&c| c != q).collect();
            let (sub, sub_cost) = optimum(cm, &rest_rows, &cols);
            if fixed.len() + 1 + sub.len() == k && fixed_cost + cm.at(g, q) + sub_cost <= best + tol {
                current = fixed.iter().copied().chain([(g, q)]).chain(sub).collect();
                chosen = Some(q);
                break;
            }
        }
        if chosen.is_none() {
            if let Some(q) = incumbent {
                chosen = Some(q);
            } else {
                continue;
            }
        }
        let q = chosen.expect("set above");
        fixed.push((g, q));
        fixed_cost += cm.at(g, q);
        free_cols.retain(|&c| c != q);
    }
    // A skipped GT is one no optimum can match given the prefix; the
    // incumbent's remaining pairs then complete the list.
    if fixed.len() < k {
        for &(g, q) in &current {
            if !fixed.iter().any(|p| p.0 == g) && !fixed.iter().any(|p| p.1 == q) {
                fixed.push((g, q));
            }
        }
        fixed.sort_unstable();
    }
    let pairs: Vec<MatchPair> = fixed
        .iter()
        .map(|&(gt, query)| MatchPair {
            gt,
            query,
            ordering: cm.ordering.get(gt * cm.cols + query).copied().unwrap_or(0),
        })
        .collect();
    let total_cost = pairs.iter().map(|p| cm.at(p.gt, p.query)).sum();
    Ok(Assignment { pairs, total_cost, num_gt: cm.rows, num_queries: cm.cols })
}

/// Fractions of GT elements whose matched query changed between layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    /// `u` of layers `1..L` against their predecessor.
    pub u_per_layer: Vec<f64>,
    /// Last layer against the first.
    pub u_t: f64,
    pub layers: usize,
    pub num_gt: usize,
}

impl StabilityReport {
    /// GT-weighted average of several reports with the same layer count.
    pub fn pool(reports: &[StabilityReport]) -> Result<StabilityReport> {
        let Some(first) = reports.first() else {
            return Err(Error::contract("StabilityReport::pool", "no reports"));
        };
        if reports.iter().any(|r| r.layers != first.layers) {
            return Err(Error::contract("StabilityReport::pool", "layer counts differ"));
        }
        let total: usize = reports.iter().map(|r| r.num_gt).sum();
        let w = |f: &dyn Fn(&StabilityReport) -> f64| -> f64 {
            if total == 0 {
                0.0
            } else {
                reports.iter().map(|r| f(r) * r.num_gt as f64).sum::<f64>() / total as f64
            }
        };
        Ok(StabilityReport {
            u_per_layer: (0..first.u_per_layer.len()).map(|l| w(&|r| r.u_per_layer[l])).collect(),
            u_t: w(&|r| r.u_t),
            layers: first.layers,
            num_gt: total,
        })
    }
}

fn changed_fraction(a: &[Option<usize>], b: &[Option<usize>]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).filter(|(x, y)| x != y).count() as f64 / a.len() as f64
}

/// `u` per layer and `u_t` from the assignments of every layer of one pass.
pub fn unstable_scores(per_layer: &[Assignment]) -> Result<StabilityReport> {
    let Some(first) = per_layer.first() else {
        return Err(Error::contract("unstable_scores", "no layers"));
    };
    if let Some(bad) = per_layer.iter().find(|a| a.num_gt != first.num_gt) {
        return Err(Error::contract(
            "unstable_scores",
            format!("GT count {} differs from {}", bad.num_gt, first.num_gt),
        ));
    }
    let q: Vec<Vec<Option<usize>>> = per_layer.iter().map(Assignment::query_of_gt).collect();
    Ok(StabilityReport {
        u_per_layer: q.windows(2).map(|w| changed_fraction(&w[1], &w[0])).collect(),
        u_t: changed_fraction(&q[q.len() - 1], &q[0]),
        layers: per_layer.len(),
        num_gt: first.num_gt,
    })
}
