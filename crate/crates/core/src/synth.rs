//! Procedural scenes and the BEV feature pyramids rendered from them.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{resample, BevExtent, ClassId, MapElement, Point, Scene, DEFAULT_NUM_POINTS};
use crate::rng;
use crate::tensor::Tensor;

/// Distance channels saturate at this many meters.
pub const TRUNCATION_M: f64 = 3.0;
/// Standard deviation of the per-entry feature noise.
pub const FEATURE_NOISE_SD: f64 = 0.01;
/// Distance channels plus one constant bias channel.
pub const BASE_CHANNELS: usize = ClassId::COUNT + 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub extent: BevExtent,
    pub num_points: usize,
    /// Inclusive (min, max) element counts per class.
    pub dividers: (usize, usize),
    pub crossings: (usize, usize),
    pub boundaries: (usize, usize),
    /// Magnitude range of divider curvature, 1/m.
    pub divider_curvature: (f64, f64),
    /// Range of the long side of a crossing, m.
    pub crossing_size: (f64, f64),
    /// Lateral distance from the extent edge to a boundary, m.
    pub boundary_margin: f64,
    /// Gaussian jitter applied to every point, m.
    pub noise_sd: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            extent: BevExtent::default(),
            num_points: DEFAULT_NUM_POINTS,
            dividers: (1, 3),
            crossings: (0, 1),
            boundaries: (1, 2),
            divider_curvature: (0.0, 0.01),
            crossing_size: (4.0, 8.0),
            boundary_margin: 2.0,
            noise_sd: 0.05,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        self.extent.validate()?;
        let bad = |what: &str| Err(Error::Config(format!("scene config: {what}")));
        for (name, (lo, hi)) in
            [("dividers", self.dividers), ("crossings", self.crossings), ("boundaries", self.boundaries)]
        {
            if lo > hi {
                return bad(&format!("{name} range min {lo} exceeds max {hi}"));
            }
        }
        if self.num_points < 2 {
            return bad("num_points must be at least 2");
        }
        let (c0, c1) = self.divider_curvature;
        if !(c0 >= 0.0 && c0 <= c1 && c1.is_finite()) {
            return bad("divider_curvature must satisfy 0 ≤ min ≤ max");
        }
        let (s0, s1) = self.crossing_size;
        if !(s0 > 0.0 && s0 <= s1 && s1.is_finite()) {
            return bad("crossing_size must satisfy 0 < min ≤ max");
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad("noise_sd must be non-negative");
        }
        if !(self.boundary_margin >= 0.0 && 2.0 * self.boundary_margin < self.extent.width_y()) {
            return bad("boundary_margin must be non-negative and leave room for lanes");
        }
        Ok(())
    }
}

/// Multi-scale BEV features; level ℓ is `[C, ⌈H/2^ℓ⌉, ⌈W/2^ℓ⌉]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
    pub extent: BevExtent,
}

impl FeaturePyramid {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn channels(&self) -> usize {
        self.levels[0].shape()[0]
    }

    /// `(h, w)` of each level.
    pub fn level_shapes(&self) -> Vec<(usize, usize)> {
        self.levels.iter().map(|t| (t.shape()[1], t.shape()[2])).collect()
    }
}

/// Per-cell instance ids over the extent grid, row-major `H×W`.
/// Id 0 is background; id `k` is the k-th scene element (1-based).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceMask {
    pub h: usize,
    pub w: usize,
    pub ids: Vec<u32>,
    pub k: usize,
}

impl InstanceMask {
    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.ids[row * self.w + col]
    }

    /// Cell count of each element id, indexed `0..=K`.
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k + 1];
        for &id in &self.ids {
            counts[id as usize] += 1;
        }
        counts
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Draws a scene. Deterministic in `(cfg, seed)`.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let e = cfg.extent;
    let mut rng = rng::stream(seed, "scene");
    let n_div = rng.gen_range(cfg.dividers.0..=cfg.dividers.1);
    let n_cross = rng.gen_range(cfg.crossings.0..=cfg.crossings.1);
    let n_bound = rng.gen_range(cfg.boundaries.0..=cfg.boundaries.1);

    let mut raw: Vec<(ClassId, Vec<Point>)> = Vec::new();
    let lane_lo = e.y_min + cfg.boundary_margin + 1.0;
    let lane_hi = e.y_max - cfg.boundary_margin - 1.0;
    if n_div > 0 && lane_lo >= lane_hi {
        return Err(Error::Generation("no lateral room for dividers inside the boundary margins".into()));
    }
    for _ in 0..n_div {
        let y0 = uniform(&mut rng, (lane_lo, lane_hi));
        let heading: f64 = rng.gen_range(-0.06..0.06);
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let kappa = sign * uniform(&mut rng, cfg.divider_curvature);
        let span = e.width_x();
        let x0 = e.x_min + rng.gen_range(0.0..0.2) * span;
        let x1 = e.x_max - rng.gen_range(0.0..0.2) * span;
        let xc = 0.5 * (x0 + x1);
        let pts = (0..=48)
            .map(|i| {
                let x = x0 + (x1 - x0) * i as f64 / 48.0;
                let d = x - xc;
                e.clamp([x, y0 + heading.tan() * d + 0.5 * kappa * d * d])
            })
            .collect();
        raw.push((ClassId::Divider, pts));
    }

    for _ in 0..n_cross {
        let long = uniform(&mut rng, cfg.crossing_size);
        let short = (0.4 * long).max(1.0);
        let radius = 0.5 * long.hypot(short);
        if 2.0 * radius >= e.width_x().min(e.width_y()) {
            return Err(Error::Generation(format!("crossing of size {long:.2} m does not fit the extent")));
        }
        let cx = rng.gen_range(e.x_min + radius..e.x_max - radius);
        let cy = rng.gen_range(e.y_min + radius..e.y_max - radius);
        let phi: f64 = rng.gen_range(-0.3..0.3);
        let (s, c) = phi.sin_cos();
        // Short side along x, long side across the road; counterclockwise.
        let corners = [(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)]
            .iter()
            .map(|&(u, v)| {
                let (dx, dy) = (u * short, v * long);
                [cx + c * dx - s * dy, cy + s * dx + c * dy]
            })
            .collect();
        raw.push((ClassId::PedCrossing, corners));
    }

    let mut left = rng.gen_bool(0.5);
    for _ in 0..n_bound {
        let y_base = if left { e.y_min + cfg.boundary_margin } else { e.y_max - cfg.boundary_margin };
        left = !left;
        let kappa = rng.gen_range(-1.0..1.0) * 0.5 * cfg.divider_curvature.1;
        let offset: f64 = rng.gen_range(-0.5..0.5);
        let pts = (0..=48)
            .map(|i| {
                let x = e.x_min + e.width_x() * i as f64 / 48.0;
                e.clamp([x, y_base + offset + 0.5 * kappa * x * x])
            })
            .collect();
        raw.push((ClassId::Boundary, pts));
    }

    let jitter = Normal::new(0.0, cfg.noise_sd).map_err(|err| Error::Generation(err.to_string()))?;
    let mut elements = Vec::with_capacity(raw.len());
    for (class_id, pts) in raw {
        let mut points = resample(&pts, cfg.num_points, class_id.kind().is_closed())
            .map_err(|err| Error::Generation(format!("{}: {err}", class_id.name())))?;
        for p in &mut points {
            *p = e.clamp([p[0] + jitter.sample(&mut rng), p[1] + jitter.sample(&mut rng)]);
        }
        elements.push(MapElement::new(class_id, points));
    }
    Ok(Scene { extent: e, elements, seed })
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p[0] - a[0] - t * dx).hypot(p[1] - a[1] - t * dy)
}

fn point_in_polygon(p: Point, poly: &[Point]) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + n - 1) % n]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Distance in meters from `p` to an element; polygon interiors are at 0.
pub fn element_distance(p: Point, element: &MapElement) -> f64 {
    let pts = &element.points;
    if element.kind.is_closed() && pts.len() >= 3 && point_in_polygon(p, pts) {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    for w in pts.windows(2) {
        best = best.min(segment_distance(p, w[0], w[1]));
    }
    if element.kind.is_closed() && pts.len() >= 2 {
        best = best.min(segment_distance(p, pts[pts.len() - 1], pts[0]));
    }
    if pts.len() == 1 {
        best = (p[0] - pts[0][0]).hypot(p[1] - pts[0][1]);
    }
    best
}

/// The pre-projection level-0 channels: one truncated distance map per
/// class followed by a constant bias channel, shaped `[4, H, W]`.
pub fn distance_channels(scene: &Scene) -> Tensor {
    let e = &scene.extent;
    let (h, w) = (e.h, e.w);
    let mut data = vec![TRUNCATION_M; BASE_CHANNELS * h * w];
    data[ClassId::COUNT * h * w..].fill(1.0);
    let (dx, dy) = e.cell_size();
    for element in &scene.elements {
        let ch = element.class_id.index();
        // Only cells within the truncation radius of the bounding box can change.
        let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in &element.points {
            x0 = x0.min(p[0]);
            x1 = x1.max(p[0]);
            y0 = y0.min(p[1]);
            y1 = y1.max(p[1]);
        }
        let r_lo = (((x0 - TRUNCATION_M - e.x_min) / dx).floor().max(0.0)) as usize;
        let r_hi = (((x1 + TRUNCATION_M - e.x_min) / dx).ceil().max(0.0) as usize).min(h);
        let c_lo = (((y0 - TRUNCATION_M - e.y_min) / dy).floor().max(0.0)) as usize;
        let c_hi = (((y1 + TRUNCATION_M - e.y_min) / dy).ceil().max(0.0) as usize).min(w);
        for r in r_lo..r_hi {
            for c in c_lo..c_hi {
                let d = element_distance(e.cell_center(r, c), element);
                let slot = &mut data[(ch * h + r) * w + c];
                *slot = slot.min(d);
            }
        }
    }
    Tensor::from_parts(vec![BASE_CHANNELS, h, w], data)
}

/// 2×2 average pooling over `[C, h, w]` with ceiling output size; border
/// windows average only the cells they cover.
pub fn avg_pool2(t: &Tensor) -> Tensor {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let src = t.data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for r in 0..oh {
            for col in 0..ow {
                let mut sum = 0.0;
                let mut n = 0.0;
                for rr in 2 * r..(2 * r + 2).min(h) {
                    for cc in 2 * col..(2 * col + 2).min(w) {
                        sum += src[(ch * h + rr) * w + cc];
                        n += 1.0;
                    }
                }
                out[(ch * oh + r) * ow + col] = sum / n;
            }
        }
    }
    Tensor::from_parts(vec![c, oh, ow], out)
}

/// Renders the feature pyramid of a scene.
///
/// The channel projection depends only on `seed`, so every scene rendered
/// with the same seed shares one feature space. The additive noise also
/// depends on the scene's own seed.
pub fn render_bev(scene: &Scene, channels: usize, num_levels: usize, seed: u64) -> Result<FeaturePyramid> {
    if channels < BASE_CHANNELS {
        return Err(Error::contract("render_bev", format!("C={channels} below {BASE_CHANNELS}")));
    }
    if num_levels < 1 {
        return Err(Error::contract("render_bev", "M must be at least 1"));
    }
    scene.extent.validate()?;
    let base = distance_channels(scene);
    let (h, w) = (scene.extent.h, scene.extent.w);
    let hw = h * w;

    let mut proj_rng = rng::stream(seed, "render.projection");
    let scale = 1.0 / (BASE_CHANNELS as f64).sqrt();
    let proj: Vec<f64> = (0..channels * BASE_CHANNELS)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut proj_rng);
            scale * z
        })
        .collect();
    let mut noise_rng = rng::stream(rng::derive_seed(seed, "render.noise") ^ scene.seed, "render.noise");

    let mut level0 = vec![0.0; channels * hw];
    for c in 0..channels {
        let out = &mut level0[c * hw..(c + 1) * hw];
        for k in 0..BASE_CHANNELS {
            let p = proj[c * BASE_CHANNELS + k];
            for (o, &b) in out.iter_mut().zip(&base.data()[k * hw..(k + 1) * hw]) {
                *o += p * b;
            }
        }
        for o in out.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut noise_rng);
            *o += FEATURE_NOISE_SD * z;
        }
    }
    let mut levels = vec![Tensor::from_parts(vec![channels, h, w], level0)];
    for _ in 1..num_levels {
        let next = avg_pool2(levels.last().unwrap());
        levels.push(next);
    }
    Ok(FeaturePyramid { levels, extent: scene.extent })
}

/// Visits every grid cell a segment passes through, in order.
fn trace_cells(a: (f64, f64), b: (f64, f64), h: usize, w: usize, mut visit: impl FnMut(usize, usize)) {
    let clamp = |v: f64, n: usize| v.clamp(0.0, n as f64 - 1e-9);
    let (a0, a1) = (clamp(a.0, h), clamp(a.1, w));
    let (b0, b1) = (clamp(b.0, h), clamp(b.1, w));
    let (mut r, mut c) = (a0.floor() as i64, a1.floor() as i64);
    let (r_end, c_end) = (b0.floor() as i64, b1.floor() as i64);
    let (d0, d1) = (b0 - a0, b1 - a1);
    let step_r = if d0 > 0.0 { 1 } else { -1 };
    let step_c = if d1 > 0.0 { 1 } else { -1 };
    let next_boundary = |pos: f64, cell: i64, d: f64| -> f64 {
        if d > 0.0 {
            (cell as f64 + 1.0 - pos) / d
        } else if d < 0.0 {
            (pos - cell as f64) / -d
        } else {
            f64::INFINITY
        }
    };
    let mut t_r = next_boundary(a0, r, d0);
    let mut t_c = next_boundary(a1, c, d1);
    let dt_r = if d0 != 0.0 { 1.0 / d0.abs() } else { f64::INFINITY };
    let dt_c = if d1 != 0.0 { 1.0 / d1.abs() } else { f64::INFINITY };
    let max_steps = (r_end - r).abs() + (c_end - c).abs();
    for _ in 0..=max_steps {
        visit(r as usize, c as usize);
        if r == r_end && c == c_end {
            break;
        }
        if t_r < t_c {
            r += step_r;
            t_r += dt_r;
        } else {
            c += step_c;
            t_c += dt_c;
        }
    }
}

/// Rasterizes scene elements onto the extent grid. Polylines are traced one
/// cell wide; polygons fill every cell whose center lies inside. Later
/// elements overwrite earlier ones.
pub fn rasterize_instances(scene: &Scene) -> InstanceMask {
    let e = &scene.extent;
    let (h, w) = (e.h, e.w);
    let mut ids = vec![0u32; h * w];
    for (k, element) in scene.elements.iter().enumerate() {
        let id = k as u32 + 1;
        if element.kind.is_closed() && element.points.len() >= 3 {
            let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
            for p in &element.points {
                x0 = x0.min(p[0]);
                x1 = x1.max(p[0]);
                y0 = y0.min(p[1]);
                y1 = y1.max(p[1]);
            }
            let (r0, c0) = e.to_grid([x0, y0]);
            let (r1, c1) = e.to_grid([x1, y1]);
            let r_lo = (r0.floor().max(0.0)) as usize;
            let c_lo = (c0.floor().max(0.0)) as usize;
            let r_hi = (r1.ceil().max(0.0) as usize).min(h);
            let c_hi = (c1.ceil().max(0.0) as usize).min(w);
            for r in r_lo..r_hi {
                for c in c_lo..c_hi {
                    if point_in_polygon(e.cell_center(r, c), &element.points) {
                        ids[r * w + c] = id;
                    }
                }
            }
        } else {
            for seg in element.points.windows(2) {
                trace_cells(e.to_grid(seg[0]), e.to_grid(seg[1]), h, w, |r, c| ids[r * w + c] = id);
            }
            if element.points.len() == 1 {
                let p = e.to_grid(element.points[0]);
                trace_cells(p, p, h, w, |r, c| ids[r * w + c] = id);
            }
        }
    }
    InstanceMask { h, w, ids, k: scene.elements.len() }
}

/// Summary written next to a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub count: usize,
    pub seed_base: u64,
    pub config: SceneConfig,
}

impl Manifest {
    /// Stable hex digest of the manifest contents.
    pub fn fingerprint(&self) -> String {
        let text = serde_json::to_string(self).expect("manifest serializes");
        format!("{:016x}", rng::derive_seed(0, &text))
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn scene_file_name(i: usize) -> String {
    format!("scene_{i:05}.json")
}

/// Seed of the `i`-th scene of a dataset.
pub fn scene_seed(seed_base: u64, i: usize) -> u64 {
    seed_base.wrapping_add(i as u64)
}

pub fn generate_dataset(cfg: &SceneConfig, count: usize, seed_base: u64) -> Result<Vec<Scene>> {
    (0..count).map(|i| generate_scene(cfg, scene_seed(seed_base, i))).collect()
}

/// Writes `count` scenes plus a manifest into `dir`.
pub fn write_dataset(dir: &Path, cfg: &SceneConfig, count: usize, seed_base: u64) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, scene) in generate_dataset(cfg, count, seed_base)?.iter().enumerate() {
        scene.save(&dir.join(scene_file_name(i)))?;
    }
    let manifest = Manifest { count, seed_base, config: cfg.clone() };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path: PathBuf = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), &e))
}

/// Loads the manifest and every scene it lists.
pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<Scene>)> {
    let manifest = load_manifest(dir)?;
    let scenes = (0..manifest.count).map(|i| Scene::load(&dir.join(scene_file_name(i)))).collect::<Result<_>>()?;
    Ok((manifest, scenes))
}
