//! Forward and reverse kernels for every tape primitive.

use std::f64::consts::TAU;

use super::Op;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Frequency base of the sinusoidal position ladder.
pub const PE_TEMPERATURE: f64 = 10000.0;

fn shape_err(op: &Op, detail: String) -> Error {
    Error::Contract { op: op.name(), detail }
}

fn same_shape(op: &Op, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("operand shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

fn arity(op: &Op, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(shape_err(op, format!("expected {} inputs, got {}", n, inputs.len())));
    }
    Ok(())
}

/// Splits `shape` around `axis` into (outer, dim, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &Op, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(shape_err(op, format!("axis {} out of range for shape {:?}", axis, t.shape())));
    }
    Ok(())
}

/// `c (+)= a · b` for row-major views with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    gemm_into(m, k, n, a, a_strides, b, b_strides, c, n, accumulate)
}

/// [`gemm`] writing rows of `c` `c_rs` elements apart.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_into(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    c_rs: usize,
    accumulate: bool,
) {
    debug_assert!(m == 0 || c.len() >= (m - 1) * c_rs + n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the caller guarantees every (row, col) reachable through the
    // strides lies inside the corresponding slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            c_rs as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Bilinear corner taps for a normalized point on an `h×w` lattice.
///
/// Coordinate 0 indexes rows and coordinate 1 indexes columns. Returns the
/// four (row, col, weight) taps plus the fractional offsets.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Taps {
    pub r0: isize,
    pub c0: isize,
    pub fr: f64,
    pub fc: f64,
}

impl Taps {
    pub fn new(p0: f64, p1: f64, h: usize, w: usize) -> Self {
        let r = p0 * h as f64 - 0.5;
        let c = p1 * w as f64 - 0.5;
        let r0 = r.floor();
        let c0 = c.floor();
        Self { r0: r0 as isize, c0: c0 as isize, fr: r - r0, fc: c - c0 }
    }

    /// (flat index into one h×w plane, weight, d weight/d fr, d weight/d fc)
    /// for each in-bounds corner.
    #[inline]
    pub fn corners(&self, h: usize, w: usize) -> impl Iterator<Item = (usize, f64, f64, f64)> {
        let Taps { r0, c0, fr, fc } = *self;
        let taps = [
            (r0, c0, (1.0 - fr) * (1.0 - fc), -(1.0 - fc), -(1.0 - fr)),
            (r0, c0 + 1, (1.0 - fr) * fc, -fc, 1.0 - fr),
            (r0 + 1, c0, fr * (1.0 - fc), 1.0 - fc, -fr),
            (r0 + 1, c0 + 1, fr * fc, fc, fr),
        ];
        taps.into_iter().filter_map(move |(r, c, wt, dr, dc)| {
            if r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w {
                Some((r as usize * w + c as usize, wt, dr, dc))
            } else {
                None
            }
        })
    }
}

fn grid_dims(op: &Op, grid: &Tensor) -> Result<(usize, usize, usize)> {
    if grid.rank() != 3 {
        return Err(shape_err(op, format!("grid must be rank 3, got {:?}", grid.shape())));
    }
    let s = grid.shape();
    Ok((s[0], s[1], s[2]))
}

/// Queries per block of a deformable attention pass.
const BLOCK: usize = 32;

/// Validated operands of [`Op::DeformableAttend`].
struct Deform<'a> {
    refs: &'a [f64],
    offs: &'a [f64],
    wts: &'a [f64],
    w_value: &'a [f64],
    grids: Vec<&'a [f64]>,
    /// `(h, w)` per level.
    dims: Vec<(usize, usize)>,
    queries: usize,
    heads: usize,
    points: usize,
    channels: usize,
    value_width: usize,
}

#[derive(Default)]
struct DeformGrads {
    refs: Option<Vec<f64>>,
    offs: Option<Vec<f64>>,
    wts: Option<Vec<f64>>,
    grids: Vec<Option<Vec<f64>>>,
}

impl<'a> Deform<'a> {
    fn new(op: &Op, inputs: &[&'a Tensor], heads: usize, points: usize) -> Result<Self> {
        if inputs.len() < 5 || heads == 0 || points == 0 {
            return Err(shape_err(op, "needs refs, offsets, weights, value weights and at least one grid".into()));
        }
        let (refs, offs, wts, wv) = (inputs[0], inputs[1], inputs[2], inputs[3]);
        let mut dims = Vec::new();
        let mut channels = None;
        for g in &inputs[4..] {
            let (h, w, c) = grid_dims(op, g)?;
            if channels.is_some_and(|k| k != c) {
                return Err(shape_err(op, "levels differ in channel count".into()));
            }
            channels = Some(c);
            dims.push((h, w));
        }
        let c = channels.unwrap_or(0);
        let q = if refs.rank() == 2 { refs.shape()[0] } else { 0 };
        let s = dims.len() * points;
        let dv = if wv.rank() == 3 { wv.shape()[2] } else { 0 };
        if refs.shape() != [q, 2]
            || offs.shape() != [q * heads, s, 2]
            || wts.shape() != [q * heads, s]
            || wv.shape() != [heads, c, dv]
        {
            return Err(shape_err(
                op,
                format!(
                    "refs {:?}, offsets {:?}, weights {:?}, value weights {:?} do not fit {} heads × {} levels × {} points of {} channels",
                    refs.shape(),
                    offs.shape(),
                    wts.shape(),
                    wv.shape(),
                    heads,
                    dims.len(),
                    points,
                    c
                ),
            ));
        }
        Ok(Self {
            refs: refs.data(),
            offs: offs.data(),
            wts: wts.data(),
            w_value: wv.data(),
            grids: inputs[4..].iter().map(|g| g.data()).collect(),
            dims,
            queries: q,
            heads,
            points,
            channels: c,
            value_width: dv,
        })
    }

    fn samples(&self) -> usize {
        self.dims.len() * self.points
    }

    /// Bilinear taps of sample `si` of row `bi = query · heads + head`.
    #[inline]
    fn taps(&self, bi: usize, si: usize) -> (usize, Taps) {
        let level = si / self.points;
        let (h, w) = self.dims[level];
        let q = bi / self.heads;
        let at = 2 * (bi * self.samples() + si);
        let p0 = self.refs[2 * q] + self.offs[at] / h as f64;
        let p1 = self.refs[2 * q + 1] + self.offs[at + 1] / w as f64;
        (level, Taps::new(p0, p1, h, w))
    }

    /// Weighted sample sums of queries `q0..q0 + nb` into `agg`, laid out
    /// `[head][query][channel]`.
    fn aggregate(&self, q0: usize, nb: usize, agg: &mut [f64]) {
        let c = self.channels;
        let s = self.samples();
        agg[..self.heads * nb * c].fill(0.0);
        let mut corner: [(&[f64], f64); 4] = [(&[], 0.0); 4];
        for j in 0..nb {
            for head in 0..self.heads {
                let bi = (q0 + j) * self.heads + head;
                let row = &mut agg[(head * nb + j) * c..(head * nb + j + 1) * c];
                for si in 0..s {
                    let a = self.wts[bi * s + si];
                    let (level, taps) = self.taps(bi, si);
                    let (h, w) = self.dims[level];
                    let mut n = 0;
                    for (idx, wt, _, _) in taps.corners(h, w) {
                        corner[n] = (&self.grids[level][idx * c..(idx + 1) * c], a * wt);
                        n += 1;
                    }
                    if n == 4 {
                        let [(v0, f0), (v1, f1), (v2, f2), (v3, f3)] = corner;
                        let taps = v0.iter().zip(v1).zip(v2).zip(v3);
                        for (o, (((x0, x1), x2), x3)) in row.iter_mut().zip(taps) {
                            *o += f0 * x0 + f1 * x1 + f2 * x2 + f3 * x3;
                        }
                    } else {
                        for &(v, f) in &corner[..n] {
                            for (o, x) in row.iter_mut().zip(v) {
                                *o += f * x;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Propagates the gradient `go` of row `bi`'s sample sum.
    fn backprop(&self, bi: usize, go: &[f64], grads: &mut DeformGrads) {
        let c = self.channels;
        let s = self.samples();
        let q = bi / self.heads;
        for si in 0..s {
            let a = self.wts[bi * s + si];
            let (level, taps) = self.taps(bi, si);
            let (h, w) = self.dims[level];
            for (idx, wt, wr, wc) in taps.corners(h, w) {
                let span = idx * c..(idx + 1) * c;
                if let Some(gg) = grads.grids[level].as_mut() {
                    for (x, g) in gg[span.clone()].iter_mut().zip(go) {
                        *x += a * wt * g;
                    }
                }
                let dot: f64 = self.grids[level][span].iter().zip(go).map(|(x, g)| x * g).sum();
                // Taps move with refs · size + offsets, both in cells.
                let (dr, dc) = (a * wr * dot, a * wc * dot);
                if let Some(gr) = grads.refs.as_mut() {
                    gr[2 * q] += dr * h as f64;
                    gr[2 * q + 1] += dc * w as f64;
                }
                let at = 2 * (bi * s + si);
                if let Some(gof) = grads.offs.as_mut() {
                    gof[at] += dr;
                    gof[at + 1] += dc;
                }
                if let Some(gw) = grads.wts.as_mut() {
                    gw[bi * s + si] += wt * dot;
                }
            }
        }
    }
}

pub(crate) fn forward(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    use Op::*;
    match op {
        Leaf | Constant => Err(shape_err(op, "leaves carry no forward rule".into())),
        Add | Sub | Mul => {
            arity(op, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            same_shape(op, a, b)?;
            let f: fn(f64, f64) -> f64 = match op {
                Add => |x, y| x + y,
                Sub => |x, y| x - y,
                _ => |x, y| x * y,
            };
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Ok(Tensor::from_parts(a.shape().to_vec(), data))
        }
        MatMul => {
            arity(op, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(shape_err(op, format!("cannot multiply {:?} by {:?}", a.shape(), b.shape())));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, a.data(), (k as isize, 1), b.data(), (n as isize, 1), &mut out, false);
            Ok(Tensor::from_parts(vec![m, n], out))
        }
        BatchMatMul { transpose_rhs } => {
            arity(op, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            let ok = a.rank() == 3 && b.rank() == 3 && a.shape()[0] == b.shape()[0];
            let (bsz, m, k) = if a.rank() == 3 { (a.shape()[0], a.shape()[1], a.shape()[2]) } else { (0, 0, 0) };
            let (bk, n) = if b.rank() == 3 {
                if *transpose_rhs {
                    (b.shape()[2], b.shape()[1])
                } else {
                    (b.shape()[1], b.shape()[2])
                }
            } else {
                (usize::MAX, 0)
            };
            if !ok || bk != k {
                return Err(shape_err(op, format!("cannot batch-multiply {:?} by {:?}", a.shape(), b.shape())));
            }
            let mut out = vec![0.0; bsz * m * n];
            let b_strides = if *transpose_rhs { (1, k as isize) } else { (n as isize, 1) };
            for i in 0..bsz {
                gemm(
                    m,
                    k,
                    n,
                    &a.data()[i * m * k..],
                    (k as isize, 1),
                    &b.data()[i * k * n..],
                    b_strides,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
            Ok(Tensor::from_parts(vec![bsz, m, n], out))
        }
        Softmax { axis } => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            check_axis(op, x, *axis)?;
            let (outer, dim, inner) = axis_split(x.shape(), *axis);
            let mut out = x.data().to_vec();
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * dim * inner + i;
                    let max = (0..dim).map(|d| out[base + d * inner]).fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for d in 0..dim {
                        let e = (out[base + d * inner] - max).exp();
                        out[base + d * inner] = e;
                        sum += e;
                    }
                    for d in 0..dim {
                        out[base + d * inner] /= sum;
                    }
                }
            }
            Ok(Tensor::from_parts(x.shape().to_vec(), out))
        }
        Relu => unary(op, inputs, |x| x.max(0.0)),
        Sigmoid => unary(op, inputs, sigmoid),
        InvSigmoid { eps } => {
            let eps = *eps;
            unary(op, inputs, move |x| {
                let c = x.clamp(eps, 1.0 - eps);
                (c / (1.0 - c)).ln()
            })
        }
        Abs => unary(op, inputs, f64::abs),
        SquaredHinge => unary(op, inputs, |x| {
            let h = x.max(0.0);
            h * h
        }),
        Affine { scale, shift } => {
            let (s, t) = (*scale, *shift);
            unary(op, inputs, move |x| s * x + t)
        }
        LayerNorm { eps } => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            if x.rank() == 0 {
                return Err(shape_err(op, "needs at least one axis".into()));
            }
            let d = x.shape()[x.rank() - 1];
            let mut out = Vec::with_capacity(x.numel());
            for row in x.data().chunks(d) {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                out.extend(row.iter().map(|v| (v - mean) * inv));
            }
            Ok(Tensor::from_parts(x.shape().to_vec(), out))
        }
        Concat { axis } => {
            if inputs.is_empty() {
                return Err(shape_err(op, "no inputs".into()));
            }
            let first = inputs[0];
            check_axis(op, first, *axis)?;
            let mut shape = first.shape().to_vec();
            let mut total = 0;
            for t in inputs {
                let mut s = t.shape().to_vec();
                if s.len() != shape.len() {
                    return Err(shape_err(op, format!("rank mismatch {:?} vs {:?}", s, shape)));
                }
                total += s[*axis];
                s[*axis] = shape[*axis];
                if s != shape {
                    return Err(shape_err(
                        op,
                        format!("shapes {:?} and {:?} disagree off-axis", t.shape(), first.shape()),
                    ));
                }
            }
            shape[*axis] = total;
            let (outer, _, inner) = axis_split(&shape, *axis);
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in inputs {
                    let chunk = t.shape()[*axis] * inner;
                    out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Ok(Tensor::from_parts(shape, out))
        }
        Slice { axis, start, end } => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            check_axis(op, x, *axis)?;
            if start >= end || *end > x.shape()[*axis] {
                return Err(shape_err(op, format!("range {}..{} invalid for shape {:?}", start, end, x.shape())));
            }
            let (outer, dim, inner) = axis_split(x.shape(), *axis);
            let len = end - start;
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * dim * inner;
                out.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[*axis] = len;
            Ok(Tensor::from_parts(shape, out))
        }
        Sum { axis } | Mean { axis } => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            let mean = matches!(op, Mean { .. });
            match axis {
                None => {
                    let s: f64 = x.data().iter().sum();
                    let n = x.numel() as f64;
                    Ok(Tensor::scalar(if mean { s / n } else { s }))
                }
                Some(axis) => {
                    check_axis(op, x, *axis)?;
                    let (outer, dim, inner) = axis_split(x.shape(), *axis);
                    let mut out = vec![0.0; outer * inner];
                    for o in 0..outer {
                        for d in 0..dim {
                            let src = &x.data()[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                            for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                                *acc += v;
                            }
                        }
                    }
                    if mean {
                        out.iter_mut().for_each(|v| *v /= dim as f64);
                    }
                    let mut shape = x.shape().to_vec();
                    shape.remove(*axis);
                    Ok(Tensor::from_parts(shape, out))
                }
            }
        }
        Reshape { shape } => {
            arity(op, inputs, 1)?;
            inputs[0]
                .clone()
                .reshaped(shape.clone())
                .map_err(|_| shape_err(op, format!("cannot view {:?} as {:?}", inputs[0].shape(), shape)))
        }
        Permute { perm } => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            let mut seen = vec![false; x.rank()];
            if perm.len() != x.rank() || perm.iter().any(|&p| p >= x.rank() || std::mem::replace(&mut seen[p], true)) {
                return Err(shape_err(op, format!("{:?} is not a permutation of the axes of {:?}", perm, x.shape())));
            }
            Ok(permute(x, perm))
        }
        Expand { axis, times } => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            check_axis(op, x, *axis)?;
            if x.shape()[*axis] != 1 || *times == 0 {
                return Err(shape_err(op, format!("axis {} of {:?} must have extent 1", axis, x.shape())));
            }
            let (outer, _, inner) = axis_split(x.shape(), *axis);
            let mut out = Vec::with_capacity(outer * times * inner);
            for o in 0..outer {
                let src = &x.data()[o * inner..(o + 1) * inner];
                for _ in 0..*times {
                    out.extend_from_slice(src);
                }
            }
            let mut shape = x.shape().to_vec();
            shape[*axis] = *times;
            Ok(Tensor::from_parts(shape, out))
        }
        Gather { indices } => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            if x.rank() == 0 || indices.is_empty() {
                return Err(shape_err(op, "needs a non-scalar input and indices".into()));
            }
            let rows = x.shape()[0];
            let width = x.numel() / rows;
            let mut out = Vec::with_capacity(indices.len() * width);
            for &i in indices {
                if i >= rows {
                    return Err(shape_err(op, format!("row {} out of {}", i, rows)));
                }
                out.extend_from_slice(&x.data()[i * width..(i + 1) * width]);
            }
            let mut shape = x.shape().to_vec();
            shape[0] = indices.len();
            Ok(Tensor::from_parts(shape, out))
        }
        Norm => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            if x.rank() == 0 {
                return Err(shape_err(op, "needs at least one axis".into()));
            }
            let d = x.shape()[x.rank() - 1];
            let out = x.data().chunks(d).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
            let mut shape = x.shape().to_vec();
            shape.pop();
            Ok(Tensor::from_parts(shape, out))
        }
        BilinearSample => {
            arity(op, inputs, 2)?;
            let (grid, pts) = (inputs[0], inputs[1]);
            let (c, h, w) = grid_dims(op, grid)?;
            if pts.rank() != 2 || pts.shape()[1] != 2 {
                return Err(shape_err(op, format!("points must be K×2, got {:?}", pts.shape())));
            }
            let k = pts.shape()[0];
            let plane = h * w;
            let g = grid.data();
            let mut out = vec![0.0; k * c];
            for (i, p) in pts.data().chunks(2).enumerate() {
                let taps = Taps::new(p[0], p[1], h, w);
                let row = &mut out[i * c..(i + 1) * c];
                for (idx, wt, _, _) in taps.corners(h, w) {
                    for (ch, o) in row.iter_mut().enumerate() {
                        *o += wt * g[ch * plane + idx];
                    }
                }
            }
            Ok(Tensor::from_parts(vec![k, c], out))
        }
        WeightedSample => {
            arity(op, inputs, 3)?;
            let (grid, pts, wts) = (inputs[0], inputs[1], inputs[2]);
            let (c, h, w) = grid_dims(op, grid)?;
            if pts.rank() != 3 || pts.shape()[2] != 2 || wts.shape() != &pts.shape()[..2] {
                return Err(shape_err(
                    op,
                    format!("points must be B×S×2 with weights B×S, got {:?} and {:?}", pts.shape(), wts.shape()),
                ));
            }
            let (b, s) = (pts.shape()[0], pts.shape()[1]);
            let plane = h * w;
            let g = grid.data();
            let mut out = vec![0.0; b * c];
            for bi in 0..b {
                let row = &mut out[bi * c..(bi + 1) * c];
                for si in 0..s {
                    let a = wts.data()[bi * s + si];
                    let p = &pts.data()[(bi * s + si) * 2..(bi * s + si) * 2 + 2];
                    let taps = Taps::new(p[0], p[1], h, w);
                    for (idx, wt, _, _) in taps.corners(h, w) {
                        let f = a * wt;
                        for (ch, o) in row.iter_mut().enumerate() {
                            *o += f * g[ch * plane + idx];
                        }
                    }
                }
            }
            Ok(Tensor::from_parts(vec![b, c], out))
        }
        DeformableAttend { heads, points } => {
            let d = Deform::new(op, inputs, *heads, *points)?;
            let (q, c, h, dv) = (d.queries, d.channels, d.heads, d.value_width);
            let mut out = vec![0.0; q * h * dv];
            let mut agg = vec![0.0; h * BLOCK * c];
            for q0 in (0..q).step_by(BLOCK) {
                let nb = BLOCK.min(q - q0);
                d.aggregate(q0, nb, &mut agg);
                for head in 0..h {
                    gemm_into(
                        nb,
                        c,
                        dv,
                        &agg[head * nb * c..],
                        (c as isize, 1),
                        &d.w_value[head * c * dv..],
                        (dv as isize, 1),
                        &mut out[(q0 * h + head) * dv..],
                        h * dv,
                        false,
                    );
                }
            }
            Ok(Tensor::from_parts(vec![q, h * dv], out))
        }
        SinusoidalPe { channels } => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            if channels % 4 != 0 || *channels == 0 {
                return Err(shape_err(op, format!("channel count {} not divisible by 4", channels)));
            }
            if x.rank() != 2 || x.shape()[1] != 2 {
                return Err(shape_err(op, format!("coordinates must be Q×2, got {:?}", x.shape())));
            }
            let half = channels / 2;
            let mut out = Vec::with_capacity(x.shape()[0] * channels);
            for p in x.data().chunks(2) {
                for &coord in p {
                    let s = coord * TAU;
                    for j in 0..half / 2 {
                        let phase = s / pe_dim(j, half);
                        out.push(phase.sin());
                        out.push(phase.cos());
                    }
                }
            }
            Ok(Tensor::from_parts(vec![x.shape()[0], *channels], out))
        }
        SigmoidFocal { alpha, gamma } => {
            arity(op, inputs, 2)?;
            let (x, t) = (inputs[0], inputs[1]);
            same_shape(op, x, t)?;
            let data = x.data().iter().zip(t.data()).map(|(&x, &t)| focal_value(x, t, *alpha, *gamma)).collect();
            Ok(Tensor::from_parts(x.shape().to_vec(), data))
        }
    }
}

fn pe_dim(j: usize, half: usize) -> f64 {
    PE_TEMPERATURE.powf(2.0 * j as f64 / half as f64)
}

fn focal_value(x: f64, t: f64, alpha: f64, gamma: f64) -> f64 {
    let p = sigmoid(x);
    let log_p = -softplus(-x);
    let log_q = -softplus(x);
    -alpha * t * (1.0 - p).powf(gamma) * log_p - (1.0 - alpha) * (1.0 - t) * p.powf(gamma) * log_q
}

fn focal_grad(x: f64, t: f64, alpha: f64, gamma: f64) -> f64 {
    let p = sigmoid(x);
    let q = 1.0 - p;
    let log_p = -softplus(-x);
    let log_q = -softplus(x);
    let pos = alpha * q.powf(gamma) * (gamma * p * log_p - q);
    let neg = (1.0 - alpha) * p.powf(gamma) * (p - gamma * q * log_q);
    t * pos + (1.0 - t) * neg
}

fn unary(op: &Op, inputs: &[&Tensor], f: impl Fn(f64) -> f64) -> Result<Tensor> {
    arity(op, inputs, 1)?;
    Ok(inputs[0].map(f))
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute(x: &Tensor, perm: &[usize]) -> Tensor {
    let in_shape = x.shape();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let data = x.data();
    for _ in 0..n {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Gradients of one node's inputs given the gradient of its output.
///
/// Only inputs flagged in `needs` are computed; the rest come back `None`.
pub(crate) fn backward(op: &Op, inputs: &[&Tensor], out: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
    use Op::*;
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    let gd = g.data();
    match op {
        Leaf | Constant => vec![],
        Add => vec![want(0).then(|| g.clone()), want(1).then(|| g.clone())],
        Sub => vec![want(0).then(|| g.clone()), want(1).then(|| g.map(|v| -v))],
        Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let prod = |x: &Tensor| {
                let data = x.data().iter().zip(gd).map(|(x, g)| x * g).collect();
                Tensor::from_parts(x.shape().to_vec(), data)
            };
            vec![want(0).then(|| prod(b)), want(1).then(|| prod(a))]
        }
        MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let ga = want(0).then(|| {
                let mut d = vec![0.0; m * k];
                gemm(m, n, k, gd, (n as isize, 1), b.data(), (1, n as isize), &mut d, false);
                Tensor::from_parts(vec![m, k], d)
            });
            let gb = want(1).then(|| {
                let mut d = vec![0.0; k * n];
                gemm(k, m, n, a.data(), (1, k as isize), gd, (n as isize, 1), &mut d, false);
                Tensor::from_parts(vec![k, n], d)
            });
            vec![ga, gb]
        }
        BatchMatMul { transpose_rhs } => {
            let (a, b) = (inputs[0], inputs[1]);
            let (bsz, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let n = out.shape()[2];
            let ga = want(0).then(|| {
                let mut d = vec![0.0; bsz * m * k];
                // b_i as k×n: strides (n,1) plain, (1,k) when stored n×k.
                let bt = if *transpose_rhs { (k as isize, 1) } else { (1, n as isize) };
                for i in 0..bsz {
                    gemm(
                        m,
                        n,
                        k,
                        &gd[i * m * n..],
                        (n as isize, 1),
                        &b.data()[i * k * n..],
                        bt,
                        &mut d[i * m * k..(i + 1) * m * k],
                        false,
                    );
                }
                Tensor::from_parts(vec![bsz, m, k], d)
            });
            let gb = want(1).then(|| {
                let mut d = vec![0.0; bsz * k * n];
                for i in 0..bsz {
                    if *transpose_rhs {
                        // d(b_i) = g_iᵀ a_i, n×k
                        gemm(
                            n,
                            m,
                            k,
                            &gd[i * m * n..],
                            (1, n as isize),
                            &a.data()[i * m * k..],
                            (k as isize, 1),
                            &mut d[i * k * n..(i + 1) * k * n],
                            false,
                        );
                    } else {
                        gemm(
                            k,
                            m,
                            n,
                            &a.data()[i * m * k..],
                            (1, k as isize),
                            &gd[i * m * n..],
                            (n as isize, 1),
                            &mut d[i * k * n..(i + 1) * k * n],
                            false,
                        );
                    }
                }
                Tensor::from_parts(b.shape().to_vec(), d)
            });
            vec![ga, gb]
        }
        Softmax { axis } => {
            let (outer, dim, inner) = axis_split(out.shape(), *axis);
            let y = out.data();
            let mut d = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * dim * inner + i;
                    let dot: f64 = (0..dim).map(|j| y[base + j * inner] * gd[base + j * inner]).sum();
                    for j in 0..dim {
                        let at = base + j * inner;
                        d[at] = y[at] * (gd[at] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_parts(out.shape().to_vec(), d))]
        }
        Relu => vec![Some(zip_map(inputs[0], g, |x, g| if x > 0.0 { g } else { 0.0 }))],
        Sigmoid => vec![Some(zip_map(out, g, |y, g| g * y * (1.0 - y)))],
        InvSigmoid { eps } => {
            let eps = *eps;
            vec![Some(zip_map(
                inputs[0],
                g,
                move |x, g| {
                    if x > eps && x < 1.0 - eps {
                        g / (x * (1.0 - x))
                    } else {
                        0.0
                    }
                },
            ))]
        }
        Abs => vec![Some(zip_map(inputs[0], g, |x, g| {
            g * if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }))],
        SquaredHinge => vec![Some(zip_map(inputs[0], g, |x, g| 2.0 * x.max(0.0) * g))],
        Affine { scale, .. } => {
            let s = *scale;
            vec![Some(g.map(|v| v * s))]
        }
        LayerNorm { eps } => {
            let x = inputs[0];
            let dsz = x.shape()[x.rank() - 1];
            let mut d = Vec::with_capacity(x.numel());
            for ((xr, yr), gr) in x.data().chunks(dsz).zip(out.data().chunks(dsz)).zip(gd.chunks(dsz)) {
                let mean = xr.iter().sum::<f64>() / dsz as f64;
                let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dsz as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let gm = gr.iter().sum::<f64>() / dsz as f64;
                let gy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / dsz as f64;
                d.extend(gr.iter().zip(yr).map(|(g, y)| inv * (g - gm - y * gy)));
            }
            vec![Some(Tensor::from_parts(x.shape().to_vec(), d))]
        }
        Concat { axis } => {
            let (outer, total, inner) = axis_split(out.shape(), *axis);
            let mut offset = 0;
            let mut res = Vec::with_capacity(inputs.len());
            for (i, t) in inputs.iter().enumerate() {
                let len = t.shape()[*axis];
                if want(i) {
                    let mut d = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        let base = o * total * inner + offset * inner;
                        d.extend_from_slice(&gd[base..base + len * inner]);
                    }
                    res.push(Some(Tensor::from_parts(t.shape().to_vec(), d)));
                } else {
                    res.push(None);
                }
                offset += len;
            }
            res
        }
        Slice { axis, start, end } => {
            let x = inputs[0];
            let (outer, dim, inner) = axis_split(x.shape(), *axis);
            let len = end - start;
            let mut d = vec![0.0; x.numel()];
            for o in 0..outer {
                let dst = o * dim * inner + start * inner;
                d[dst..dst + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::from_parts(x.shape().to_vec(), d))]
        }
        Sum { axis } | Mean { axis } => {
            let x = inputs[0];
            let mean = matches!(op, Mean { .. });
            match axis {
                None => {
                    let scale = if mean { 1.0 / x.numel() as f64 } else { 1.0 };
                    vec![Some(Tensor::full(x.shape(), gd[0] * scale))]
                }
                Some(axis) => {
                    let (outer, dim, inner) = axis_split(x.shape(), *axis);
                    let scale = if mean { 1.0 / dim as f64 } else { 1.0 };
                    let mut d = Vec::with_capacity(x.numel());
                    for o in 0..outer {
                        let src = &gd[o * inner..(o + 1) * inner];
                        for _ in 0..dim {
                            d.extend(src.iter().map(|v| v * scale));
                        }
                    }
                    vec![Some(Tensor::from_parts(x.shape().to_vec(), d))]
                }
            }
        }
        Reshape { .. } => vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), gd.to_vec()))],
        Permute { perm } => vec![Some(permute(g, &inverse_perm(perm)))],
        Expand { axis, times } => {
            let x = inputs[0];
            let (outer, _, inner) = axis_split(x.shape(), *axis);
            let mut d = vec![0.0; x.numel()];
            for o in 0..outer {
                for t in 0..*times {
                    let src = &gd[(o * times + t) * inner..(o * times + t + 1) * inner];
                    for (acc, v) in d[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *acc += v;
                    }
                }
            }
            vec![Some(Tensor::from_parts(x.shape().to_vec(), d))]
        }
        Gather { indices } => {
            let x = inputs[0];
            let width = x.numel() / x.shape()[0];
            let mut d = vec![0.0; x.numel()];
            for (row, &i) in indices.iter().enumerate() {
                for (acc, v) in d[i * width..(i + 1) * width].iter_mut().zip(&gd[row * width..(row + 1) * width]) {
                    *acc += v;
                }
            }
            vec![Some(Tensor::from_parts(x.shape().to_vec(), d))]
        }
        Norm => {
            let x = inputs[0];
            let dsz = x.shape()[x.rank() - 1];
            let mut d = Vec::with_capacity(x.numel());
            for ((row, &n), &gv) in x.data().chunks(dsz).zip(out.data()).zip(gd) {
                if n > 0.0 {
                    d.extend(row.iter().map(|v| gv * v / n));
                } else {
                    d.extend(std::iter::repeat_n(0.0, dsz));
                }
            }
            vec![Some(Tensor::from_parts(x.shape().to_vec(), d))]
        }
        BilinearSample => {
            let (grid, pts) = (inputs[0], inputs[1]);
            let (c, h, w) = (grid.shape()[0], grid.shape()[1], grid.shape()[2]);
            let plane = h * w;
            let gv = grid.data();
            let mut g_grid = want(0).then(|| vec![0.0; grid.numel()]);
            let mut g_pts = want(1).then(|| vec![0.0; pts.numel()]);
            for (i, p) in pts.data().chunks(2).enumerate() {
                let taps = Taps::new(p[0], p[1], h, w);
                let go = &gd[i * c..(i + 1) * c];
                let (mut dr, mut dc) = (0.0, 0.0);
                for (idx, wt, wr, wc) in taps.corners(h, w) {
                    if let Some(gg) = g_grid.as_mut() {
                        for (ch, gval) in go.iter().enumerate() {
                            gg[ch * plane + idx] += wt * gval;
                        }
                    }
                    if g_pts.is_some() {
                        let dot: f64 = go.iter().enumerate().map(|(ch, gval)| gval * gv[ch * plane + idx]).sum();
                        dr += wr * dot;
                        dc += wc * dot;
                    }
                }
                if let Some(gp) = g_pts.as_mut() {
                    gp[2 * i] = dr * h as f64;
                    gp[2 * i + 1] = dc * w as f64;
                }
            }
            vec![
                g_grid.map(|d| Tensor::from_parts(grid.shape().to_vec(), d)),
                g_pts.map(|d| Tensor::from_parts(pts.shape().to_vec(), d)),
            ]
        }
        WeightedSample => {
            let (grid, pts, wts) = (inputs[0], inputs[1], inputs[2]);
            let (c, h, w) = (grid.shape()[0], grid.shape()[1], grid.shape()[2]);
            let (b, s) = (pts.shape()[0], pts.shape()[1]);
            let plane = h * w;
            let gv = grid.data();
            let mut g_grid = want(0).then(|| vec![0.0; grid.numel()]);
            let mut g_pts = want(1).then(|| vec![0.0; pts.numel()]);
            let mut g_w = want(2).then(|| vec![0.0; wts.numel()]);
            let need_dot = g_pts.is_some() || g_w.is_some();
            for bi in 0..b {
                let go = &gd[bi * c..(bi + 1) * c];
                for si in 0..s {
                    let at = bi * s + si;
                    let a = wts.data()[at];
                    let p = &pts.data()[at * 2..at * 2 + 2];
                    let taps = Taps::new(p[0], p[1], h, w);
                    let (mut dr, mut dc, mut dw) = (0.0, 0.0, 0.0);
                    for (idx, wt, wr, wc) in taps.corners(h, w) {
                        if let Some(gg) = g_grid.as_mut() {
                            let f = a * wt;
                            for (ch, gval) in go.iter().enumerate() {
                                gg[ch * plane + idx] += f * gval;
                            }
                        }
                        if need_dot {
                            let dot: f64 = go.iter().enumerate().map(|(ch, gval)| gval * gv[ch * plane + idx]).sum();
                            dr += wr * dot;
                            dc += wc * dot;
                            dw += wt * dot;
                        }
                    }
                    if let Some(gp) = g_pts.as_mut() {
                        gp[2 * at] = a * dr * h as f64;
                        gp[2 * at + 1] = a * dc * w as f64;
                    }
                    if let Some(gw) = g_w.as_mut() {
                        gw[at] = dw;
                    }
                }
            }
            vec![
                g_grid.map(|d| Tensor::from_parts(grid.shape().to_vec(), d)),
                g_pts.map(|d| Tensor::from_parts(pts.shape().to_vec(), d)),
                g_w.map(|d| Tensor::from_parts(wts.shape().to_vec(), d)),
            ]
        }
        DeformableAttend { heads, points } => {
            let d = Deform::new(op, inputs, *heads, *points).expect("validated in forward");
            let (q, c, h, dv) = (d.queries, d.channels, d.heads, d.value_width);
            let mut grads = DeformGrads {
                refs: want(0).then(|| vec![0.0; inputs[0].numel()]),
                offs: want(1).then(|| vec![0.0; inputs[1].numel()]),
                wts: want(2).then(|| vec![0.0; inputs[2].numel()]),
                grids: (0..d.grids.len()).map(|l| want(4 + l).then(|| vec![0.0; inputs[4 + l].numel()])).collect(),
            };
            let mut g_wv = want(3).then(|| vec![0.0; inputs[3].numel()]);
            let through_samples = want(0) || want(1) || want(2) || grads.grids.iter().any(Option::is_some);
            let mut agg = vec![0.0; h * BLOCK * c];
            let mut dagg = vec![0.0; h * BLOCK * c];
            for q0 in (0..q).step_by(BLOCK) {
                let nb = BLOCK.min(q - q0);
                if let Some(gw) = g_wv.as_mut() {
                    d.aggregate(q0, nb, &mut agg);
                    for head in 0..h {
                        gemm(
                            c,
                            nb,
                            dv,
                            &agg[head * nb * c..],
                            (1, c as isize),
                            &gd[(q0 * h + head) * dv..],
                            ((h * dv) as isize, 1),
                            &mut gw[head * c * dv..(head + 1) * c * dv],
                            true,
                        );
                    }
                }
                if !through_samples {
                    continue;
                }
                for head in 0..h {
                    gemm(
                        nb,
                        dv,
                        c,
                        &gd[(q0 * h + head) * dv..],
                        ((h * dv) as isize, 1),
                        &d.w_value[head * c * dv..],
                        (1, dv as isize),
                        &mut dagg[head * nb * c..(head + 1) * nb * c],
                        false,
                    );
                }
                for head in 0..h {
                    for j in 0..nb {
                        let at = (head * nb + j) * c;
                        d.backprop((q0 + j) * h + head, &dagg[at..at + c], &mut grads);
                    }
                }
            }
            let shaped = |i: usize, v: Option<Vec<f64>>| v.map(|v| Tensor::from_parts(inputs[i].shape().to_vec(), v));
            let mut out = vec![shaped(0, grads.refs), shaped(1, grads.offs), shaped(2, grads.wts), shaped(3, g_wv)];
            for (l, gg) in grads.grids.into_iter().enumerate() {
                out.push(shaped(4 + l, gg));
            }
            out
        }
        SinusoidalPe { channels } => {
            let x = inputs[0];
            let half = channels / 2;
            let mut d = Vec::with_capacity(x.numel());
            for (q, p) in x.data().chunks(2).enumerate() {
                for (axis, &coord) in p.iter().enumerate() {
                    let s = coord * TAU;
                    let mut acc = 0.0;
                    for j in 0..half / 2 {
                        let dim = pe_dim(j, half);
                        let phase = s / dim;
                        let base = q * channels + axis * half + 2 * j;
                        acc += gd[base] * phase.cos() * TAU / dim;
                        acc -= gd[base + 1] * phase.sin() * TAU / dim;
                    }
                    d.push(acc);
                }
            }
            vec![Some(Tensor::from_parts(x.shape().to_vec(), d))]
        }
        SigmoidFocal { alpha, gamma } => {
            let (x, t) = (inputs[0], inputs[1]);
            let data = x
                .data()
                .iter()
                .zip(t.data())
                .zip(gd)
                .map(|((&x, &t), &g)| g * focal_grad(x, t, *alpha, *gamma))
                .collect();
            // Targets are labels; they receive no gradient.
            vec![Some(Tensor::from_parts(x.shape().to_vec(), data)), None]
        }
    }
}

fn zip_map(a: &Tensor, g: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(g.data()).map(|(&x, &g)| f(x, g)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}
