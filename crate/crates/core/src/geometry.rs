//! Vectorized map elements, the BEV frame, and point-set geometry.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 2D coordinate: `[x, y]`, meters or normalized units depending on context.
pub type Point = [f64; 2];

/// Default number of points per map element.
pub const DEFAULT_NUM_POINTS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum ClassId {
    Divider = 0,
    PedCrossing = 1,
    Boundary = 2,
}

impl ClassId {
    pub const ALL: [ClassId; 3] = [ClassId::Divider, ClassId::PedCrossing, ClassId::Boundary];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassId::Divider => "divider",
            ClassId::PedCrossing => "ped_crossing",
            ClassId::Boundary => "boundary",
        }
    }

    /// Geometry kind elements of this class are drawn with.
    pub fn kind(self) -> ElementKind {
        match self {
            ClassId::PedCrossing => ElementKind::Polygon,
            _ => ElementKind::Polyline,
        }
    }
}

impl TryFrom<u8> for ClassId {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        Self::from_index(v as usize).ok_or_else(|| format!("unknown class id {v}"))
    }
}

impl From<ClassId> for u8 {
    fn from(c: ClassId) -> u8 {
        c as u8
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementKind {
    Polyline,
    /// Implicitly closed ring; the last point does not repeat the first.
    Polygon,
}

impl ElementKind {
    pub fn is_closed(self) -> bool {
        self == ElementKind::Polygon
    }
}

/// A classed, ordered point sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapElement {
    pub class_id: ClassId,
    pub kind: ElementKind,
    pub points: Vec<Point>,
}

impl MapElement {
    pub fn new(class_id: ClassId, points: Vec<Point>) -> Self {
        Self { class_id, kind: class_id.kind(), points }
    }

    pub fn orderings(&self) -> Vec<Vec<usize>> {
        equivalent_orderings(self.kind, self.points.len())
    }

    /// Copy with points taken in the order given by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self { class_id: self.class_id, kind: self.kind, points: perm.iter().map(|&i| self.points[i]).collect() }
    }

    pub fn resampled(&self, n: usize) -> Result<Self> {
        Ok(Self { class_id: self.class_id, kind: self.kind, points: resample(&self.points, n, self.kind.is_closed())? })
    }
}

/// Metric extent of the BEV frame and its grid resolution.
///
/// `x` is longitudinal and maps to grid rows (`h`); `y` is lateral and maps
/// to grid columns (`w`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BevExtent {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub h: usize,
    pub w: usize,
}

impl Default for BevExtent {
    fn default() -> Self {
        Self { x_min: -30.0, x_max: 30.0, y_min: -15.0, y_max: 15.0, h: 200, w: 100 }
    }
}

impl BevExtent {
    pub fn validate(&self) -> Result<()> {
        if !(self.x_max > self.x_min && self.y_max > self.y_min) {
            return Err(Error::contract("BevExtent", format!("empty extent {self:?}")));
        }
        if self.h < 2 || self.w < 2 {
            return Err(Error::contract("BevExtent", format!("grid {}×{} below 2×2", self.h, self.w)));
        }
        Ok(())
    }

    pub fn width_x(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn width_y(&self) -> f64 {
        self.y_max - self.y_min
    }

    /// Cell size along x (rows) and y (columns), in meters.
    pub fn cell_size(&self) -> (f64, f64) {
        (self.width_x() / self.h as f64, self.width_y() / self.w as f64)
    }

    pub fn contains(&self, p: Point) -> bool {
        p[0] >= self.x_min && p[0] <= self.x_max && p[1] >= self.y_min && p[1] <= self.y_max
    }

    pub fn clamp(&self, p: Point) -> Point {
        [p[0].clamp(self.x_min, self.x_max), p[1].clamp(self.y_min, self.y_max)]
    }

    /// Metric center of grid cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> Point {
        let (dx, dy) = self.cell_size();
        [self.x_min + (row as f64 + 0.5) * dx, self.y_min + (col as f64 + 0.5) * dy]
    }

    /// Continuous grid coordinate (row, col) of a metric point; cell `(r, c)`
    /// spans `[r, r + 1) × [c, c + 1)`.
    pub fn to_grid(&self, p: Point) -> (f64, f64) {
        let (dx, dy) = self.cell_size();
        ((p[0] - self.x_min) / dx, (p[1] - self.y_min) / dy)
    }
}

/// A set of map elements in one BEV frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub extent: BevExtent,
    pub elements: Vec<MapElement>,
    pub seed: u64,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        self.extent.validate()?;
        for (i, e) in self.elements.iter().enumerate() {
            if let Some(p) = e.points.iter().find(|p| !self.extent.contains(**p)) {
                return Err(Error::contract("Scene", format!("element {i} point {:?} lies outside the extent", p)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json("scene", &e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), &e))
    }

    /// Copy with every element resampled to `n` points.
    pub fn resampled(&self, n: usize) -> Result<Self> {
        Ok(Self {
            extent: self.extent,
            elements: self.elements.iter().map(|e| e.resampled(n)).collect::<Result<_>>()?,
            seed: self.seed,
        })
    }
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Resamples a chain to `n` points evenly spaced by arc length.
///
/// Open chains keep both endpoints exactly. Closed chains include the
/// closing segment and start at the first input point.
pub fn resample(points: &[Point], n: usize, closed: bool) -> Result<Vec<Point>> {
    if n < 2 {
        return Err(Error::contract("resample", format!("target count {n} below 2")));
    }
    if points.len() < 2 {
        return Err(Error::Degenerate(format!("{} input point(s)", points.len())));
    }
    let mut chain: Vec<Point> = points.to_vec();
    if closed {
        chain.push(points[0]);
    }
    let mut cum = Vec::with_capacity(chain.len());
    cum.push(0.0);
    for w in chain.windows(2) {
        cum.push(cum.last().unwrap() + dist(w[0], w[1]));
    }
    let total = *cum.last().unwrap();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::Degenerate("all input points coincide".into()));
    }
    let step = if closed { total / n as f64 } else { total / (n - 1) as f64 };
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    for i in 0..n {
        if !closed && i == n - 1 {
            out.push(*points.last().unwrap());
            break;
        }
        let s = step * i as f64;
        while seg + 1 < cum.len() - 1 && cum[seg + 1] < s {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let t = if len > 0.0 { ((s - cum[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
        let (a, b) = (chain[seg], chain[seg + 1]);
        out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
    }
    Ok(out)
}

/// Point-index permutations that describe the same geometric element.
///
/// Polylines admit the identity and the reversal. Polygons admit every
/// cyclic shift in both directions. The identity always comes first.
pub fn equivalent_orderings(kind: ElementKind, n: usize) -> Vec<Vec<usize>> {
    match kind {
        ElementKind::Polyline => vec![(0..n).collect(), (0..n).rev().collect()],
        ElementKind::Polygon => {
            let mut all = Vec::with_capacity(2 * n);
            for shift in 0..n {
                all.push((0..n).map(|i| (shift + i) % n).collect());
            }
            for shift in 0..n {
                all.push((0..n).map(|i| (shift + n - i) % n).collect());
            }
            all
        }
    }
}

/// Symmetric Chamfer distance: the mean of the two directed
/// mean-nearest-neighbor distances.
pub fn chamfer(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("chamfer", "point sets must be non-empty"));
    }
    Ok(0.5 * (directed_chamfer(a, b) + directed_chamfer(b, a)))
}

fn directed_chamfer(from: &[Point], to: &[Point]) -> f64 {
    let sum: f64 = from.iter().map(|&p| to.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min)).sum();
    sum / from.len() as f64
}

const RANGE_TOL: f64 = 1e-9;

/// Affine map of metric points onto the unit square.
pub fn normalize(points: &[Point], extent: &BevExtent) -> Result<Vec<Point>> {
    points
        .iter()
        .map(|&p| {
            let u = (p[0] - extent.x_min) / extent.width_x();
            let v = (p[1] - extent.y_min) / extent.width_y();
            check_unit("normalize", p, [u, v])
        })
        .collect()
}

/// Inverse of [`normalize`].
pub fn denormalize(points: &[Point], extent: &BevExtent) -> Result<Vec<Point>> {
    points
        .iter()
        .map(|&p| {
            check_unit("denormalize", p, p)?;
            Ok([extent.x_min + p[0] * extent.width_x(), extent.y_min + p[1] * extent.width_y()])
        })
        .collect()
}

fn check_unit(op: &'static str, original: Point, unit: Point) -> Result<Point> {
    for (axis, &c) in unit.iter().enumerate() {
        if !(-RANGE_TOL..=1.0 + RANGE_TOL).contains(&c) {
            return Err(Error::contract(op, format!("coordinate {} of point {:?} is out of range", axis, original)));
        }
    }
    Ok([unit[0].clamp(0.0, 1.0), unit[1].clamp(0.0, 1.0)])
}
