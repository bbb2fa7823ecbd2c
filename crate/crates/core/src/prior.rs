//! Offline shape priors: ordering-invariant K-Means over normalized map
//! elements, abstraction of the largest clusters, and persistence.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{equivalent_orderings, normalize, resample, BevExtent, ClassId, ElementKind, MapElement, Point};
use crate::rng;

pub const DEFAULT_K: usize = 50;
pub const DEFAULT_N_PRI: usize = 9;
pub const DEFAULT_MAX_ITERS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    /// `N_p` points in normalized coordinates.
    pub centroid: Vec<Point>,
    pub member_count: usize,
    pub dominant_class: ClassId,
    pub dominant_kind: ElementKind,
    pub inertia_contribution: f64,
}

/// Result of a K-Means fit.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub clusters: Vec<Cluster>,
    /// `(cluster, ordering index)` of each input element.
    pub assignments: Vec<(usize, usize)>,
    /// Objective after each assignment sweep.
    pub objective: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

struct Candidate {
    /// Flattened `[x0, y0, x1, y1, ...]` under each equivalent ordering.
    variants: Vec<Vec<f64>>,
    class_id: ClassId,
    kind: ElementKind,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Candidate {
    /// Minimum squared distance over orderings, with the first minimizing
    /// ordering index.
    fn distance(&self, centroid: &[f64]) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for (o, v) in self.variants.iter().enumerate() {
            let d = sq_dist(v, centroid);
            if d < best.0 {
                best = (d, o);
            }
        }
        best
    }
}

fn prepare(elements: &[MapElement], extent: &BevExtent) -> Result<Vec<Candidate>> {
    let n_p = elements[0].points.len();
    elements
        .iter()
        .enumerate()
        .map(|(i, e)| {
            if e.points.len() != n_p {
                return Err(Error::contract(
                    "canonical_kmeans",
                    format!("element {i} has {} points, expected {n_p}", e.points.len()),
                ));
            }
            let unit = normalize(&e.points, extent)?;
            let variants = equivalent_orderings(e.kind, n_p)
                .iter()
                .map(|perm| perm.iter().flat_map(|&j| unit[j]).collect())
                .collect();
            Ok(Candidate { variants, class_id: e.class_id, kind: e.kind })
        })
        .collect()
}

fn seed_centroids(cands: &[Candidate], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng::stream(seed, "kmeans.seeding");
    let mut chosen = vec![false; cands.len()];
    let first = rng.gen_range(0..cands.len());
    chosen[first] = true;
    let mut centroids = vec![cands[first].variants[0].clone()];
    let mut nearest: Vec<f64> = cands.iter().map(|c| c.distance(&centroids[0]).0).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut pick = None;
            for (i, &d) in nearest.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = Some(i);
                    break;
                }
                target -= d;
            }
            // Rounding can exhaust the loop; fall back to the last positive weight.
            pick.unwrap_or_else(|| nearest.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            let free: Vec<usize> = (0..cands.len()).filter(|&i| !chosen[i]).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen[pick] = true;
        let c = cands[pick].variants[0].clone();
        for (n, cand) in nearest.iter_mut().zip(cands) {
            *n = n.min(cand.distance(&c).0);
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd iterations where an element's distance to a centroid is the
/// minimum squared L2 over its equivalent orderings, in normalized extent
/// coordinates. Ties go to the lowest cluster index. Empty clusters keep
/// their previous centroid.
pub fn canonical_kmeans(
    elements: &[MapElement],
    extent: &BevExtent,
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<KMeansFit> {
    if elements.is_empty() {
        return Err(Error::Fit("no elements to cluster".into()));
    }
    if k == 0 || k > elements.len() {
        return Err(Error::Fit(format!("k={k} with {} elements", elements.len())));
    }
    let cands = prepare(elements, extent)?;
    let dim = cands[0].variants[0].len();
    let mut centroids = seed_centroids(&cands, k, seed);
    let mut assignments: Vec<(usize, usize)> = Vec::new();
    let mut distances = vec![0.0; cands.len()];
    let mut objective = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iters.max(1) {
        iterations += 1;
        let mut next = Vec::with_capacity(cands.len());
        for (i, cand) in cands.iter().enumerate() {
            let mut best = (f64::INFINITY, 0, 0);
            for (c, centroid) in centroids.iter().enumerate() {
                let (d, o) = cand.distance(centroid);
                if d < best.0 {
                    best = (d, c, o);
                }
            }
            distances[i] = best.0;
            next.push((best.1, best.2));
        }
        objective.push(distances.iter().sum());
        if next == assignments {
            converged = true;
            break;
        }
        assignments = next;

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (cand, &(c, o)) in cands.iter().zip(&assignments) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(&cand.variants[o]) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let n = counts[c] as f64;
                centroids[c] = sums[c].iter().map(|s| s / n).collect();
            }
        }
    }

    let clusters = (0..k)
        .map(|c| {
            let members: Vec<usize> = (0..cands.len()).filter(|&i| assignments[i].0 == c).collect();
            let mut class_votes = [0usize; ClassId::COUNT];
            let mut polygon_votes = 0;
            for &i in &members {
                class_votes[cands[i].class_id.index()] += 1;
                polygon_votes += usize::from(cands[i].kind == ElementKind::Polygon);
            }
            // First maximum wins, so ties go to the lowest class id.
            let dominant =
                (0..ClassId::COUNT).fold(0, |best, j| if class_votes[j] > class_votes[best] { j } else { best });
            Cluster {
                centroid: centroids[c].chunks(2).map(|p| [p[0], p[1]]).collect(),
                member_count: members.len(),
                dominant_class: ClassId::from_index(dominant).unwrap(),
                dominant_kind: if 2 * polygon_votes > members.len() {
                    ElementKind::Polygon
                } else {
                    ElementKind::Polyline
                },
                inertia_contribution: members.iter().map(|&i| distances[i]).sum(),
            }
        })
        .collect();
    Ok(KMeansFit { clusters, assignments, objective, iterations, converged })
}

/// One abstracted prior shape in normalized coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prior {
    pub kind: ElementKind,
    pub points: Vec<Point>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitMeta {
    pub k: usize,
    pub seed: u64,
    pub iterations: usize,
    pub dataset_fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorBank {
    pub n_pri: usize,
    pub n_p: usize,
    pub priors: Vec<Prior>,
    pub meta: FitMeta,
}

/// Chord-length parameters in `[0, 1]`, or `None` if all points coincide.
fn chord_params(points: &[Point]) -> Option<Vec<f64>> {
    let mut t = vec![0.0];
    for w in points.windows(2) {
        t.push(t.last().unwrap() + (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]));
    }
    let total = *t.last().unwrap();
    if total <= 0.0 {
        return None;
    }
    Some(t.into_iter().map(|v| v / total).collect())
}

/// Least-squares coefficients `[a0, a1, a2]` of `a0 + a1 t + a2 t²`.
fn fit_quadratic(t: &[f64], v: &[f64]) -> [f64; 3] {
    let mut ata = [[0.0; 3]; 3];
    let mut atb = [0.0; 3];
    for (&ti, &vi) in t.iter().zip(v) {
        let basis = [1.0, ti, ti * ti];
        for r in 0..3 {
            atb[r] += basis[r] * vi;
            for c in 0..3 {
                ata[r][c] += basis[r] * basis[c];
            }
        }
    }
    solve3(ata, atb).unwrap_or_else(|| {
        // Fewer than three distinct parameters: fall back to a line.
        let n = t.len() as f64;
        let (mt, mv) = (t.iter().sum::<f64>() / n, v.iter().sum::<f64>() / n);
        let sxx: f64 = t.iter().map(|x| (x - mt) * (x - mt)).sum();
        let sxy: f64 = t.iter().zip(v).map(|(x, y)| (x - mt) * (y - mv)).sum();
        let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
        [mv - slope * mt, slope, 0.0]
    })
}

#[allow(clippy::needless_range_loop)]
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for r in col + 1..3 {
            let f = a[r][col] / a[col][col];
            for c in col..3 {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for r in (0..3).rev() {
        let s: f64 = (r + 1..3).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// Quadratic parametric fit of a polyline, resampled uniformly by arc length.
pub fn abstract_polyline(points: &[Point], n: usize) -> Result<Vec<Point>> {
    let Some(t) = chord_params(points) else {
        return Ok(vec![points[0]; n]);
    };
    let xs: Vec<f64> = points.iter().map(|p| p[0]).collect();
    let ys: Vec<f64> = points.iter().map(|p| p[1]).collect();
    let (cx, cy) = (fit_quadratic(&t, &xs), fit_quadratic(&t, &ys));
    let eval = |c: &[f64; 3], s: f64| c[0] + s * (c[1] + s * c[2]);
    const DENSE: usize = 512;
    let dense: Vec<Point> = (0..=DENSE)
        .map(|i| {
            let s = i as f64 / DENSE as f64;
            [eval(&cx, s), eval(&cy, s)]
        })
        .collect();
    match resample(&dense, n, false) {
        Ok(out) => Ok(out),
        Err(Error::Degenerate(_)) => Ok(vec![dense[0]; n]),
        Err(e) => Err(e),
    }
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Convex hull, counterclockwise, without collinear points.
pub fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Point> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Minimum-area enclosing rectangle, corners counterclockwise. `None` when
/// the points are collinear.
pub fn min_area_rectangle(points: &[Point]) -> Option<[Point; 4]> {
    let hull = convex_hull(points);
    if hull.len() < 3 {
        return None;
    }
    let mut best: Option<(f64, [Point; 4])> = None;
    for i in 0..hull.len() {
        let (a, b) = (hull[i], hull[(i + 1) % hull.len()]);
        let len = (b[0] - a[0]).hypot(b[1] - a[1]);
        if len == 0.0 {
            continue;
        }
        let u = [(b[0] - a[0]) / len, (b[1] - a[1]) / len];
        let v = [-u[1], u[0]];
        let (mut u0, mut u1, mut v0, mut v1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in &hull {
            let pu = p[0] * u[0] + p[1] * u[1];
            let pv = p[0] * v[0] + p[1] * v[1];
            u0 = u0.min(pu);
            u1 = u1.max(pu);
            v0 = v0.min(pv);
            v1 = v1.max(pv);
        }
        let area = (u1 - u0) * (v1 - v0);
        if best.as_ref().is_none_or(|(a, _)| area < *a) {
            let at = |s: f64, t: f64| [s * u[0] + t * v[0], s * u[1] + t * v[1]];
            best = Some((area, [at(u0, v0), at(u1, v0), at(u1, v1), at(u0, v1)]));
        }
    }
    best.map(|(_, r)| r)
}

fn signed_area(points: &[Point]) -> f64 {
    let n = points.len();
    (0..n).map(|i| cross([0.0, 0.0], points[i], points[(i + 1) % n])).sum::<f64>() * 0.5
}

/// Minimum-area rectangle of a ring, starting at the corner nearest the
/// ring's first point, with the ring's orientation, perimeter-resampled.
pub fn abstract_polygon(points: &[Point], n: usize) -> Result<Vec<Point>> {
    let Some(mut rect) = min_area_rectangle(points) else {
        return abstract_polyline(points, n);
    };
    if signed_area(points) < 0.0 {
        rect.reverse();
    }
    let first = points[0];
    let start = (0..4)
        .min_by(|&i, &j| {
            let di = (rect[i][0] - first[0]).hypot(rect[i][1] - first[1]);
            let dj = (rect[j][0] - first[0]).hypot(rect[j][1] - first[1]);
            di.total_cmp(&dj)
        })
        .unwrap();
    rect.rotate_left(start);
    resample(&rect, n, true)
}

fn clamp_unit(points: Vec<Point>) -> Vec<Point> {
    points.into_iter().map(|p| [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]).collect()
}

/// Indices of clusters by descending member count, ties by index.
pub fn rank_clusters(clusters: &[Cluster]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..clusters.len()).collect();
    order.sort_by(|&a, &b| clusters[b].member_count.cmp(&clusters[a].member_count).then(a.cmp(&b)));
    order
}

/// Abstracts the `n_pri` largest clusters into regular shapes: polylines
/// become quadratic curves, polygons become rectangles.
pub fn abstract_priors(clusters: &[Cluster], n_pri: usize, meta: FitMeta) -> Result<PriorBank> {
    if n_pri > clusters.len() {
        return Err(Error::Fit(format!("n_pri={n_pri} exceeds {} clusters", clusters.len())));
    }
    let n_p = clusters.first().map_or(0, |c| c.centroid.len());
    let priors = rank_clusters(clusters)
        .into_iter()
        .take(n_pri)
        .map(|i| {
            let c = &clusters[i];
            let points = match c.dominant_kind {
                ElementKind::Polyline => abstract_polyline(&c.centroid, n_p)?,
                ElementKind::Polygon => abstract_polygon(&c.centroid, n_p)?,
            };
            Ok(Prior { kind: c.dominant_kind, points: clamp_unit(points) })
        })
        .collect::<Result<_>>()?;
    Ok(PriorBank { n_pri, n_p, priors, meta })
}

impl PriorBank {
    pub fn validate(&self) -> Result<()> {
        if self.priors.len() != self.n_pri {
            return Err(Error::contract(
                "PriorBank",
                format!("{} priors, header says {}", self.priors.len(), self.n_pri),
            ));
        }
        for (i, p) in self.priors.iter().enumerate() {
            if p.points.len() != self.n_p {
                return Err(Error::contract(
                    "PriorBank",
                    format!("prior {i} has {} points, expected {}", p.points.len(), self.n_p),
                ));
            }
            if p.points.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::contract("PriorBank", format!("prior {i} leaves the unit square")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("prior bank serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let bank: Self = serde_json::from_str(text).map_err(|e| Error::json("prior bank", &e))?;
        bank.validate()?;
        Ok(bank)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bank: Self = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), &e))?;
        bank.validate()?;
        Ok(bank)
    }

    /// Warning text when the bank was fit on a different dataset.
    pub fn fingerprint_warning(&self, dataset_fingerprint: &str) -> Option<String> {
        (self.meta.dataset_fingerprint != dataset_fingerprint).then(|| {
            format!(
                "prior bank was fit on dataset {} but is applied to {}",
                self.meta.dataset_fingerprint, dataset_fingerprint
            )
        })
    }

    /// The prior shapes as `[N_pri, N_p, 2]` coordinates.
    pub fn shapes(&self) -> Vec<Vec<Point>> {
        self.priors.iter().map(|p| p.points.clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::chamfer;
    use rand_distr::{Distribution, Normal};

    fn unit_extent() -> BevExtent {
        BevExtent { x_min: 0.0, x_max: 1.0, y_min: 0.0, y_max: 1.0, h: 10, w: 10 }
    }

    fn line(a: Point, b: Point, n: usize) -> Vec<Point> {
        (0..n)
            .map(|i| {
                let t = i as f64 / (n - 1) as f64;
                [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
            })
            .collect()
    }

    #[test]
    fn identical_elements_collapse() {
        let e = MapElement::new(ClassId::Divider, line([0.1, 0.2], [0.8, 0.3], 6));
        let fit = canonical_kmeans(&vec![e.clone(); 5], &unit_extent(), 1, 0, 10).unwrap();
        assert!(fit.converged);
        assert!(*fit.objective.last().unwrap() < 1e-24);
        for (c, p) in fit.clusters[0].centroid.iter().zip(&e.points) {
            assert!((c[0] - p[0]).abs() < 1e-15 && (c[1] - p[1]).abs() < 1e-15);
        }
        assert_eq!(fit.clusters[0].member_count, 5);
    }

    #[test]
    fn too_many_clusters_is_a_fit_error() {
        let e = MapElement::new(ClassId::Divider, line([0.1, 0.2], [0.8, 0.3], 6));
        assert!(matches!(canonical_kmeans(&[e], &unit_extent(), 2, 0, 10), Err(Error::Fit(_))));
        assert!(matches!(canonical_kmeans(&[], &unit_extent(), 1, 0, 10), Err(Error::Fit(_))));
    }

    #[test]
    fn reversed_duplicates_share_a_cluster_at_zero_cost() {
        let pts = line([0.1, 0.1], [0.9, 0.4], 8);
        let mut rev = pts.clone();
        rev.reverse();
        let elems = vec![MapElement::new(ClassId::Divider, pts), MapElement::new(ClassId::Divider, rev)];
        let fit = canonical_kmeans(&elems, &unit_extent(), 1, 3, 10).unwrap();
        assert!(fit.objective.last().unwrap().abs() < 1e-24);
    }

    fn two_groups(seed: u64) -> Vec<MapElement> {
        let mut rng = rng::stream(seed, "groups");
        let noise = Normal::new(0.0, 0.03).unwrap();
        (0..30)
            .map(|i| {
                let dx = if i % 2 == 0 { 0.1 } else { 0.6 };
                let pts = line([dx, 0.2], [dx + 0.2, 0.8], 6)
                    .into_iter()
                    .map(|p| [p[0] + noise.sample(&mut rng), p[1] + noise.sample(&mut rng)])
                    .collect();
                MapElement::new(ClassId::Divider, pts)
            })
            .collect()
    }

    #[test]
    fn converged_assignment_matches_brute_force_labels() {
        for seed in 0..5 {
            let elems = two_groups(seed);
            let fit = canonical_kmeans(&elems, &unit_extent(), 2, seed, 100).unwrap();
            assert!(fit.converged);
            for (e, &(c, _)) in elems.iter().zip(&fit.assignments) {
                // Exhaustive oracle: try every cluster under both orderings.
                let mut best = (f64::INFINITY, usize::MAX);
                for (ci, cl) in fit.clusters.iter().enumerate() {
                    for reversed in [false, true] {
                        let mut d = 0.0;
                        for j in 0..e.points.len() {
                            let p = if reversed { e.points[e.points.len() - 1 - j] } else { e.points[j] };
                            d += (p[0] - cl.centroid[j][0]).powi(2) + (p[1] - cl.centroid[j][1]).powi(2);
                        }
                        if d < best.0 {
                            best = (d, ci);
                        }
                    }
                }
                assert_eq!(c, best.1);
            }
            // The two groups are split cleanly.
            let a = fit.assignments[0].0;
            assert!(fit.assignments.iter().enumerate().all(|(i, &(c, _))| (c == a) == (i % 2 == 0)));
        }
    }

    #[test]
    fn objective_never_increases() {
        let scenes = crate::synth::generate_dataset(&crate::synth::SceneConfig::default(), 30, 5).unwrap();
        let extent = scenes[0].extent;
        let elems: Vec<MapElement> = scenes.into_iter().flat_map(|s| s.elements).collect();
        for seed in 0..4 {
            let fit = canonical_kmeans(&elems, &extent, 8, seed, 50).unwrap();
            for w in fit.objective.windows(2) {
                assert!(w[1] <= w[0], "{:?}", fit.objective);
            }
        }
    }

    #[test]
    fn polygon_distance_is_ordering_invariant() {
        let square = vec![[0.2, 0.2], [0.5, 0.2], [0.5, 0.6], [0.3, 0.7], [0.2, 0.5]];
        let other = [[0.25, 0.3], [0.45, 0.25], [0.55, 0.5], [0.35, 0.6], [0.22, 0.45]];
        let extent = unit_extent();
        let base = MapElement::new(ClassId::PedCrossing, square);
        let cands = prepare(std::slice::from_ref(&base), &extent).unwrap();
        let centroid: Vec<f64> = other.iter().flatten().copied().collect();
        let reference = cands[0].distance(&centroid).0;
        for perm in base.orderings() {
            let c = prepare(&[base.permuted(&perm)], &extent).unwrap();
            assert!((c[0].distance(&centroid).0 - reference).abs() < 1e-15);
        }
    }

    #[test]
    fn straight_line_survives_abstraction() {
        let pts = line([0.1, 0.15], [0.7, 0.9], 20);
        let out = abstract_polyline(&pts, 20).unwrap();
        for (a, b) in pts.iter().zip(&out) {
            assert!((a[0] - b[0]).abs() < 1e-6 && (a[1] - b[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn abstraction_reduces_noise_around_a_line() {
        let truth = line([0.1, 0.2], [0.9, 0.6], 20);
        let noise = Normal::new(0.0, 0.02).unwrap();
        let mut rng = rng::stream(1, "noise");
        let noisy: Vec<Point> =
            truth.iter().map(|p| [p[0] + noise.sample(&mut rng), p[1] + noise.sample(&mut rng)]).collect();
        // Residual to the generating line (perpendicular distance).
        let (a, b) = (truth[0], truth[19]);
        let resid = |p: &Point| cross(a, b, *p).abs() / (b[0] - a[0]).hypot(b[1] - a[1]);
        let before = noisy.iter().map(resid).fold(0.0, f64::max);
        let after = abstract_polyline(&noisy, 20).unwrap().iter().map(resid).fold(0.0, f64::max);
        assert!(after < before, "{after} vs {before}");
    }

    #[test]
    fn square_becomes_its_own_rectangle() {
        let corners = [[0.2, 0.3], [0.6, 0.3], [0.6, 0.7], [0.2, 0.7]];
        let ring = resample(&corners, 20, true).unwrap();
        let rect = min_area_rectangle(&ring).unwrap();
        for c in &corners {
            let err = rect.iter().map(|r| (r[0] - c[0]).hypot(r[1] - c[1])).fold(f64::INFINITY, f64::min);
            assert!(err < 1e-6);
        }
        let out = abstract_polygon(&ring, 20).unwrap();
        for (a, b) in ring.iter().zip(&out) {
            assert!((a[0] - b[0]).hypot(a[1] - b[1]) < 1e-6);
        }
        // Clockwise input keeps its orientation.
        let mut cw = ring.clone();
        cw[1..].reverse();
        let out = abstract_polygon(&cw, 20).unwrap();
        assert!(signed_area(&out) < 0.0);
        assert_eq!(out[0], cw[0]);
    }

    #[test]
    fn rotated_rectangle_oracle() {
        let (c, s) = (0.4f64.cos(), 0.4f64.sin());
        let corners: Vec<Point> = [(-0.2, -0.1), (0.2, -0.1), (0.2, 0.1), (-0.2, 0.1)]
            .iter()
            .map(|&(u, v)| [0.5 + c * u - s * v, 0.5 + s * u + c * v])
            .collect();
        let ring = resample(&corners, 16, true).unwrap();
        let rect = min_area_rectangle(&ring).unwrap();
        for k in &corners {
            let err = rect.iter().map(|r| (r[0] - k[0]).hypot(r[1] - k[1])).fold(f64::INFINITY, f64::min);
            assert!(err < 1e-9);
        }
    }

    fn bank() -> PriorBank {
        PriorBank {
            n_pri: 2,
            n_p: 3,
            priors: vec![
                Prior {
                    kind: ElementKind::Polyline,
                    points: vec![[0.1, 0.2], [0.30000000000000004, 0.5], [1.0 / 3.0, 0.9]],
                },
                Prior { kind: ElementKind::Polygon, points: vec![[0.0, 0.0], [1.0, 0.0], [0.5, 1.0]] },
            ],
            meta: FitMeta { k: 4, seed: 7, iterations: 3, dataset_fingerprint: "abc".into() },
        }
    }

    #[test]
    fn bank_json_roundtrip_is_exact() {
        let b = bank();
        let back = PriorBank::from_json(&b.to_json()).unwrap();
        assert_eq!(back, b);
        let v: serde_json::Value = serde_json::from_str(&b.to_json()).unwrap();
        assert_eq!(v["priors"][1]["kind"], "polygon");
        assert_eq!(v["meta"]["dataset_fingerprint"], "abc");
    }

    #[test]
    fn truncated_bank_is_a_parse_error() {
        let text = bank().to_json();
        let cut = &text[..text.len() / 2];
        match PriorBank::from_json(cut) {
            Err(Error::Parse { line, .. }) => assert!(line > 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn fingerprint_mismatch_warns() {
        let b = bank();
        assert!(b.fingerprint_warning("abc").is_none());
        assert!(b.fingerprint_warning("xyz").unwrap().contains("xyz"));
    }

    #[test]
    fn ranking_breaks_ties_by_index() {
        let mk = |n| Cluster {
            centroid: vec![[0.0, 0.0]; 2],
            member_count: n,
            dominant_class: ClassId::Divider,
            dominant_kind: ElementKind::Polyline,
            inertia_contribution: 0.0,
        };
        assert_eq!(rank_clusters(&[mk(2), mk(5), mk(2), mk(7)]), vec![3, 1, 0, 2]);
    }

    #[test]
    fn archetypes_are_recovered() {
        let archetypes: Vec<(ElementKind, Vec<Point>)> = vec![
            (ElementKind::Polyline, line([0.05, 0.1], [0.95, 0.1], 20)),
            (ElementKind::Polyline, line([0.05, 0.5], [0.95, 0.5], 20)),
            (ElementKind::Polyline, line([0.05, 0.9], [0.95, 0.9], 20)),
            (ElementKind::Polyline, line([0.1, 0.3], [0.9, 0.35], 20)),
            (ElementKind::Polyline, line([0.2, 0.05], [0.2, 0.95], 20)),
            (ElementKind::Polyline, line([0.7, 0.05], [0.7, 0.95], 20)),
            (ElementKind::Polygon, resample(&[[0.3, 0.6], [0.45, 0.6], [0.45, 0.8], [0.3, 0.8]], 20, true).unwrap()),
            (ElementKind::Polygon, resample(&[[0.6, 0.2], [0.9, 0.2], [0.9, 0.3], [0.6, 0.3]], 20, true).unwrap()),
            (ElementKind::Polygon, resample(&[[0.5, 0.65], [0.85, 0.65], [0.85, 0.8], [0.5, 0.8]], 20, true).unwrap()),
        ];
        let noise = Normal::new(0.0, 0.01).unwrap();
        let mut rng = rng::stream(2, "archetypes");
        let mut elems = Vec::new();
        for (a, (kind, pts)) in archetypes.iter().enumerate() {
            for _ in 0..(20 + a) {
                let points =
                    pts.iter().map(|p| [p[0] + noise.sample(&mut rng), p[1] + noise.sample(&mut rng)]).collect();
                let class_id = if *kind == ElementKind::Polygon { ClassId::PedCrossing } else { ClassId::Divider };
                elems.push(MapElement { class_id, kind: *kind, points });
            }
        }
        let extent = BevExtent { x_min: -0.1, x_max: 1.1, y_min: -0.1, y_max: 1.1, h: 10, w: 10 };
        let fit = canonical_kmeans(&elems, &extent, 9, 4, 100).unwrap();
        let bank = abstract_priors(&fit.clusters, 9, FitMeta::default()).unwrap();
        for (_, pts) in &archetypes {
            let unit = normalize(pts, &extent).unwrap();
            let best = bank.priors.iter().map(|p| chamfer(&p.points, &unit).unwrap()).fold(f64::INFINITY, f64::min);
            assert!(best < 0.03, "{best}");
        }
    }
}
