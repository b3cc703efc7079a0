//! Numeric kernels behind the tape operations. Pure functions over slices.

use super::tensor::{numel, strides};

/// Sentinel index for scatter entries that are dropped.
pub const DROP: usize = usize::MAX;

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out`, zero along broadcast axes.
pub fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let lead = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < lead || shape[i - lead] == 1 {
                0
            } else {
                own[i - lead]
            }
        })
        .collect()
}

/// Calls `f(out_index, a_index, b_index)` for every element of `out`.
pub fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total = numel(out);
    if total == 0 {
        return;
    }
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    let last = rank - 1;
    let n_last = out[last];
    let (la, lb) = (sa[last], sb[last]);
    let mut o = 0;
    while o < total {
        for j in 0..n_last {
            f(o + j, ia + j * la, ib + j * lb);
        }
        o += n_last;
        // carry into the higher axes
        let mut ax = last;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            ia -= sa[ax] * out[ax];
            ib -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner).
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// grad_a = g · bᵀ, grad_b = aᵀ · g.
pub fn matmul_backward(a: &[f64], b: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut ga = vec![0.0; m * k];
    let mut gb = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            let aip = a[i * k + p];
            if aip != 0.0 {
                let gbrow = &mut gb[p * n..(p + 1) * n];
                for (gv, x) in gbrow.iter_mut().zip(grow) {
                    *gv += aip * x;
                }
            }
        }
    }
    (ga, gb)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.padding - self.kh) / self.stride + 1,
            (self.w + 2 * self.padding - self.kw) / self.stride + 1,
        )
    }

    /// Input coordinate touched by output `o` and kernel tap `k`, if inside.
    #[inline]
    fn tap(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.padding as isize;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    }
}

pub fn conv2d(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let mut out = vec![0.0; g.batch * g.c_out * ho * wo];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let obase = (b * g.c_out + co) * ho * wo;
            if let Some(bias) = bias {
                out[obase..obase + ho * wo].iter_mut().for_each(|v| *v = bias[co]);
            }
            for ci in 0..g.c_in {
                let ibase = (b * g.c_in + ci) * g.h * g.w;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = w[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..ho {
                            let Some(iy) = g.tap(oy, ky, g.h) else { continue };
                            let orow = obase + oy * wo;
                            let irow = ibase + iy * g.w;
                            for ox in 0..wo {
                                if let Some(ix) = g.tap(ox, kx, g.w) {
                                    out[orow + ox] += wv * x[irow + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns (grad_x, grad_w, grad_bias).
pub fn conv2d_backward(x: &[f64], w: &[f64], gout: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (ho, wo) = g.out_hw();
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; g.c_out];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let obase = (b * g.c_out + co) * ho * wo;
            gb[co] += gout[obase..obase + ho * wo].iter().sum::<f64>();
            for ci in 0..g.c_in {
                let ibase = (b * g.c_in + ci) * g.h * g.w;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let widx = ((co * g.c_in + ci) * g.kh + ky) * g.kw + kx;
                        let wv = w[widx];
                        let mut acc = 0.0;
                        for oy in 0..ho {
                            let Some(iy) = g.tap(oy, ky, g.h) else { continue };
                            let orow = obase + oy * wo;
                            let irow = ibase + iy * g.w;
                            for ox in 0..wo {
                                if let Some(ix) = g.tap(ox, kx, g.w) {
                                    let go = gout[orow + ox];
                                    acc += go * x[irow + ix];
                                    gx[irow + ix] += go * wv;
                                }
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let max = (0..n).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..n {
                let e = (x[at(k)] - max).exp();
                y[at(k)] = e;
                total += e;
            }
            for k in 0..n {
                y[at(k)] /= total;
            }
        }
    }
    y
}

pub fn softmax_backward(y: &[f64], g: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut gx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let dot: f64 = (0..n).map(|k| y[at(k)] * g[at(k)]).sum();
            for k in 0..n {
                gx[at(k)] = y[at(k)] * (g[at(k)] - dot);
            }
        }
    }
    gx
}

pub fn permute(x: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zero = vec![0; out_shape.len()];
    let mut out = vec![0.0; x.len()];
    for_each_broadcast(&out_shape, &src_strides, &zero, |o, i, _| out[o] = x[i]);
    (out, out_shape)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Product of all preceding entries along the last axis; first entry is 1.
pub fn exclusive_cumprod(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row_in, row_out) in x.chunks(n).zip(out.chunks_mut(n)) {
        let mut run = 1.0;
        for (xi, yi) in row_in.iter().zip(row_out.iter_mut()) {
            *yi = run;
            run *= xi;
        }
    }
    out
}

/// O(n²) per row; stays exact when entries are zero.
pub fn exclusive_cumprod_backward(x: &[f64], g: &[f64], n: usize) -> Vec<f64> {
    let mut gx = vec![0.0; x.len()];
    for ((xr, gr), gxr) in x.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
        let mut prefix = 1.0;
        for k in 0..n {
            let mut run = prefix;
            let mut acc = 0.0;
            for j in k + 1..n {
                acc += gr[j] * run;
                run *= xr[j];
            }
            gxr[k] = acc;
            prefix *= xr[k];
        }
    }
    gx
}

/// Corner offsets and weights of a bilinear sample at (x, y) on an h×w lattice
/// whose nodes sit at integer coordinates. Out-of-range corners are skipped.
struct Bilinear {
    x0: isize,
    y0: isize,
    fx: f64,
    fy: f64,
}

impl Bilinear {
    fn at(x: f64, y: f64) -> Self {
        let (xf, yf) = (x.floor(), y.floor());
        Self { x0: xf as isize, y0: yf as isize, fx: x - xf, fy: y - yf }
    }

    /// (flat index, weight, d weight/dx, d weight/dy) for the in-range corners.
    fn corners(&self, h: usize, w: usize) -> impl Iterator<Item = (usize, f64, f64, f64)> + '_ {
        [(0isize, 0isize), (1, 0), (0, 1), (1, 1)].into_iter().filter_map(move |(dx, dy)| {
            let cx = self.x0 + dx;
            let cy = self.y0 + dy;
            if cx < 0 || cy < 0 || cx >= w as isize || cy >= h as isize {
                return None;
            }
            let (wx, dwx) = if dx == 1 { (self.fx, 1.0) } else { (1.0 - self.fx, -1.0) };
            let (wy, dwy) = if dy == 1 { (self.fy, 1.0) } else { (1.0 - self.fy, -1.0) };
            Some((cy as usize * w + cx as usize, wx * wy, dwx * wy, wx * dwy))
        })
    }
}

/// input [C,H,W], coords [N,2] as (x, y) → out [C,N].
pub fn bilinear_sample(input: &[f64], c: usize, h: usize, w: usize, coords: &[f64]) -> Vec<f64> {
    let n = coords.len() / 2;
    let mut out = vec![0.0; c * n];
    for s in 0..n {
        let b = Bilinear::at(coords[2 * s], coords[2 * s + 1]);
        for (idx, wt, _, _) in b.corners(h, w) {
            for ch in 0..c {
                out[ch * n + s] += wt * input[ch * h * w + idx];
            }
        }
    }
    out
}

pub fn bilinear_sample_backward(
    input: &[f64],
    c: usize,
    h: usize,
    w: usize,
    coords: &[f64],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = coords.len() / 2;
    let mut gin = vec![0.0; input.len()];
    let mut gc = vec![0.0; coords.len()];
    for s in 0..n {
        let b = Bilinear::at(coords[2 * s], coords[2 * s + 1]);
        for (idx, wt, dwx, dwy) in b.corners(h, w) {
            for ch in 0..c {
                let go = g[ch * n + s];
                let v = input[ch * h * w + idx];
                gin[ch * h * w + idx] += go * wt;
                gc[2 * s] += go * v * dwx;
                gc[2 * s + 1] += go * v * dwy;
            }
        }
    }
    (gin, gc)
}

struct Trilinear {
    base: [isize; 3],
    frac: [f64; 3],
}

impl Trilinear {
    fn at(p: &[f64]) -> Self {
        let f = [p[0].floor(), p[1].floor(), p[2].floor()];
        Self { base: [f[0] as isize, f[1] as isize, f[2] as isize], frac: [p[0] - f[0], p[1] - f[1], p[2] - f[2]] }
    }

    /// (flat index, weight, [d weight/dx, d/dy, d/dz]) for in-range corners of a
    /// lattice with extents (x: w, y: h, z: d).
    fn corners(&self, d: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, f64, [f64; 3])> + '_ {
        let ext = [w as isize, h as isize, d as isize];
        (0..8u8).filter_map(move |bits| {
            let mut cell = [0isize; 3];
            let mut wts = [0.0; 3];
            let mut dws = [0.0; 3];
            for a in 0..3 {
                let hi = (bits >> a) & 1 == 1;
                cell[a] = self.base[a] + hi as isize;
                if cell[a] < 0 || cell[a] >= ext[a] {
                    return None;
                }
                (wts[a], dws[a]) = if hi { (self.frac[a], 1.0) } else { (1.0 - self.frac[a], -1.0) };
            }
            let idx = (cell[2] as usize * h + cell[1] as usize) * w + cell[0] as usize;
            let wt = wts[0] * wts[1] * wts[2];
            let grad = [dws[0] * wts[1] * wts[2], wts[0] * dws[1] * wts[2], wts[0] * wts[1] * dws[2]];
            Some((idx, wt, grad))
        })
    }
}

/// input [C,D,H,W], coords [N,3] as (x, y, z) → out [C,N].
pub fn trilinear_sample(input: &[f64], c: usize, d: usize, h: usize, w: usize, coords: &[f64]) -> Vec<f64> {
    let n = coords.len() / 3;
    let vol = d * h * w;
    let mut out = vec![0.0; c * n];
    for s in 0..n {
        let t = Trilinear::at(&coords[3 * s..3 * s + 3]);
        for (idx, wt, _) in t.corners(d, h, w) {
            for ch in 0..c {
                out[ch * n + s] += wt * input[ch * vol + idx];
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn trilinear_sample_backward(
    input: &[f64],
    c: usize,
    d: usize,
    h: usize,
    w: usize,
    coords: &[f64],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = coords.len() / 3;
    let vol = d * h * w;
    let mut gin = vec![0.0; input.len()];
    let mut gc = vec![0.0; coords.len()];
    for s in 0..n {
        let t = Trilinear::at(&coords[3 * s..3 * s + 3]);
        for (idx, wt, dw) in t.corners(d, h, w) {
            for ch in 0..c {
                let go = g[ch * n + s];
                let v = input[ch * vol + idx];
                gin[ch * vol + idx] += go * wt;
                for a in 0..3 {
                    gc[3 * s + a] += go * v * dw[a];
                }
            }
        }
    }
    (gin, gc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes_follow_right_alignment() {
        assert_eq!(broadcast_shape(&[3, 1, 4], &[2, 1]), Some(vec![3, 2, 4]));
        assert_eq!(broadcast_shape(&[], &[2, 2]), Some(vec![2, 2]));
        assert_eq!(broadcast_shape(&[3], &[4]), None);
    }

    #[test]
    fn cumprod_handles_zero_entries() {
        let x = [0.5, 0.0, 2.0, 3.0];
        assert_eq!(exclusive_cumprod(&x, 4), vec![1.0, 0.5, 0.0, 0.0]);
        let g = [1.0, 1.0, 1.0, 1.0];
        // d/dx1 of (x0·x1 + x0·x1·x2) at x1 = 0 is x0 + x0·x2
        let gx = exclusive_cumprod_backward(&x, &g, 4);
        assert!((gx[1] - (0.5 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn bilinear_hits_lattice_nodes_exactly() {
        let input: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let out = bilinear_sample(&input, 1, 3, 4, &[2.0, 1.0, 0.5, 0.0]);
        assert_eq!(out[0], 6.0);
        assert_eq!(out[1], 0.5);
    }
}
