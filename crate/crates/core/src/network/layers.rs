//! Forward and reverse-mode kernels over channel-major feature maps.

use std::borrow::Cow;

use crate::volume::Dims;

/// Kernel taps per 3x3x3 convolution.
pub(crate) const TAPS: usize = 27;

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn silu(pre: &[f64]) -> Vec<f64> {
    pre.iter().map(|&x| x * sigmoid(x)).collect()
}

/// `grad *= silu'(pre)` in place.
pub(crate) fn silu_backward(pre: &[f64], grad: &mut [f64]) {
    for (g, &x) in grad.iter_mut().zip(pre) {
        let s = sigmoid(x);
        *g *= s * (1.0 + x * (1.0 - s));
    }
}

/// Output grid of a padded 3x3x3 convolution with the given stride.
pub(crate) fn conv_out_dims(input: Dims, stride: usize) -> Dims {
    let f = |n: usize| (n - 1) / stride + 1;
    Dims::new(f(input.nx), f(input.ny), f(input.nz))
}

/// Range of output positions whose tap `d` (0..3) lands inside `0..n_in`.
#[inline]
fn valid_range(n_out: usize, n_in: usize, stride: usize, d: usize) -> (usize, usize) {
    // input index = stride * o + d - 1
    let lo = if d == 0 { 1usize.div_ceil(stride) } else { 0 };
    // stride * o + d - 1 <= n_in - 1  =>  o <= (n_in - d) / stride
    let hi = if n_in + 1 > d { ((n_in - d) / stride + 1).min(n_out) } else { 0 };
    (lo, hi.max(lo))
}

/// Input rows rearranged so every tap reads a contiguous run.
///
/// For stride 1 this is the input itself. For stride 2 each row is split
/// into its even samples followed by its odd samples; tap `dx` of output `o`
/// reads `2o + dx - 1`, i.e. odd `o - 1`, even `o`, odd `o` for `dx = 0, 1, 2`.
struct Rows<'a> {
    data: Cow<'a, [f64]>,
    nx: usize,
    half: usize,
}

impl<'a> Rows<'a> {
    fn new(input: &'a [f64], nx: usize, stride: usize) -> Self {
        if stride == 1 {
            return Rows {
                data: Cow::Borrowed(input),
                nx,
                half: 0,
            };
        }
        let half = nx.div_ceil(2);
        let mut data = vec![0.0; input.len()];
        for (src, dst) in input.chunks_exact(nx).zip(data.chunks_exact_mut(nx)) {
            for (x, &v) in src.iter().enumerate() {
                dst[if x % 2 == 0 { x / 2 } else { half + x / 2 }] = v;
            }
        }
        Rows {
            data: Cow::Owned(data),
            nx,
            half,
        }
    }

    /// Undoes the stride-2 split.
    fn into_natural(self) -> Vec<f64> {
        if self.half == 0 {
            return self.data.into_owned();
        }
        let mut out = vec![0.0; self.data.len()];
        for (src, dst) in self.data.chunks_exact(self.nx).zip(out.chunks_exact_mut(self.nx)) {
            for (x, v) in dst.iter_mut().enumerate() {
                *v = src[if x % 2 == 0 { x / 2 } else { self.half + x / 2 }];
            }
        }
        out
    }

    /// Offset within a row such that `row[start + o]` is tap `d` of output
    /// `o`, for `o` in the tap's valid range (never negative there).
    #[inline]
    fn tap_start(&self, d: usize, lo: usize) -> usize {
        if self.half == 0 {
            lo + d - 1
        } else {
            match d {
                0 => self.half + lo - 1,
                1 => lo,
                _ => self.half + lo,
            }
        }
    }
}

/// Zero-padded 3x3x3 convolution. `weight` is `[cout][cin][dz][dy][dx]`.
pub(crate) fn conv3d(
    input: &[f64],
    cin: usize,
    in_dims: Dims,
    weight: &[f64],
    bias: &[f64],
    cout: usize,
    stride: usize,
) -> Vec<f64> {
    let od = conv_out_dims(in_dims, stride);
    let (ni, no) = (in_dims.len(), od.len());
    debug_assert_eq!(input.len(), cin * ni);
    debug_assert_eq!(weight.len(), cout * cin * TAPS);
    let rows = Rows::new(input, in_dims.nx, stride);
    let mut out = vec![0.0; cout * no];
    let xr: Vec<_> = (0..3).map(|d| valid_range(od.nx, in_dims.nx, stride, d)).collect();
    for z in 0..od.nz {
        for y in 0..od.ny {
            let orow = (z * od.ny + y) * od.nx;
            for co in 0..cout {
                let acc = &mut out[co * no + orow..co * no + orow + od.nx];
                acc.iter_mut().for_each(|a| *a = bias[co]);
                for ci in 0..cin {
                    let w = &weight[(co * cin + ci) * TAPS..(co * cin + ci + 1) * TAPS];
                    for dz in 0..3 {
                        let zi = stride * z + dz;
                        if zi == 0 || zi > in_dims.nz {
                            continue;
                        }
                        for dy in 0..3 {
                            let yi = stride * y + dy;
                            if yi == 0 || yi > in_dims.ny {
                                continue;
                            }
                            let roff = ci * ni + ((zi - 1) * in_dims.ny + yi - 1) * in_dims.nx;
                            let irow = &rows.data[roff..roff + in_dims.nx];
                            for dx in 0..3 {
                                let wv = w[(dz * 3 + dy) * 3 + dx];
                                let (lo, hi) = xr[dx];
                                let start = rows.tap_start(dx, lo);
                                for (a, &v) in acc[lo..hi].iter_mut().zip(&irow[start..start + hi - lo]) {
                                    *a += wv * v;
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

/// Gradients of [`conv3d`]. Returns `(grad_input, grad_weight, grad_bias)`;
/// the input gradient is skipped when not wanted.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3d_backward(
    input: &[f64],
    cin: usize,
    in_dims: Dims,
    weight: &[f64],
    cout: usize,
    stride: usize,
    grad_out: &[f64],
    want_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let od = conv_out_dims(in_dims, stride);
    let (ni, no) = (in_dims.len(), od.len());
    let rows = Rows::new(input, in_dims.nx, stride);
    let mut gin = want_input.then(|| Rows {
        data: Cow::Owned(vec![0.0; cin * ni]),
        nx: rows.nx,
        half: rows.half,
    });
    let mut gw = vec![0.0; weight.len()];
    let gb: Vec<f64> = (0..cout).map(|co| sum(&grad_out[co * no..(co + 1) * no])).collect();
    let xr: Vec<_> = (0..3).map(|d| valid_range(od.nx, in_dims.nx, stride, d)).collect();
    for z in 0..od.nz {
        for y in 0..od.ny {
            let orow = (z * od.ny + y) * od.nx;
            for co in 0..cout {
                let g = &grad_out[co * no + orow..co * no + orow + od.nx];
                if g.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for ci in 0..cin {
                    let base = (co * cin + ci) * TAPS;
                    for dz in 0..3 {
                        let zi = stride * z + dz;
                        if zi == 0 || zi > in_dims.nz {
                            continue;
                        }
                        for dy in 0..3 {
                            let yi = stride * y + dy;
                            if yi == 0 || yi > in_dims.ny {
                                continue;
                            }
                            let roff = ci * ni + ((zi - 1) * in_dims.ny + yi - 1) * in_dims.nx;
                            let irow = &rows.data[roff..roff + in_dims.nx];
                            for dx in 0..3 {
                                let tap = (dz * 3 + dy) * 3 + dx;
                                let (lo, hi) = xr[dx];
                                let start = rows.tap_start(dx, lo);
                                let gs = &g[lo..hi];
                                gw[base + tap] += dot(gs, &irow[start..start + hi - lo]);
                                if let Some(gi) = gin.as_mut() {
                                    let wv = weight[base + tap];
                                    let dst = &mut gi.data.to_mut()[roff + start..roff + start + hi - lo];
                                    for (t, &v) in dst.iter_mut().zip(gs) {
                                        *t += wv * v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (gin.map(Rows::into_natural), gw, gb)
}

/// Dot product with eight fixed accumulation lanes (vectorisable and
/// independent of call site).
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            lanes[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7])) + tail
}

#[inline]
pub(crate) fn sum(a: &[f64]) -> f64 {
    let mut lanes = [0.0; 8];
    let ca = a.chunks_exact(8);
    let tail: f64 = ca.remainder().iter().sum();
    for x in ca {
        for k in 0..8 {
            lanes[k] += x[k];
        }
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7])) + tail
}



/// Voxels per block in the per-voxel layers; keeps one block of every
/// input channel cache resident.
const TILE: usize = 128;

/// Per-voxel affine map: `out[o][v] = b[o] + sum_i W[o][i] in[i][v]`.
pub(crate) fn dense(input: &[f64], cin: usize, n: usize, weight: &[f64], bias: &[f64], cout: usize) -> Vec<f64> {
    let mut out = vec![0.0; cout * n];
    for t0 in (0..n).step_by(TILE) {
        let len = TILE.min(n - t0);
        for o in 0..cout {
            let acc = &mut out[o * n + t0..o * n + t0 + len];
            acc.iter_mut().for_each(|a| *a = bias[o]);
            for i in 0..cin {
                let w = weight[o * cin + i];
                if w == 0.0 {
                    continue;
                }
                for (a, &v) in acc.iter_mut().zip(&input[i * n + t0..i * n + t0 + len]) {
                    *a += w * v;
                }
            }
        }
    }
    out
}

/// Gradients of [`dense`]: `(grad_input, grad_weight, grad_bias)`.
pub(crate) fn dense_backward(
    input: &[f64],
    cin: usize,
    n: usize,
    weight: &[f64],
    cout: usize,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gin = vec![0.0; cin * n];
    let mut gw = vec![0.0; cout * cin];
    let mut gb = vec![0.0; cout];
    for t0 in (0..n).step_by(TILE) {
        let len = TILE.min(n - t0);
        for o in 0..cout {
            let g = &grad_out[o * n + t0..o * n + t0 + len];
            gb[o] += sum(g);
            for i in 0..cin {
                let x = &input[i * n + t0..i * n + t0 + len];
                gw[o * cin + i] += dot(g, x);
                let w = weight[o * cin + i];
                if w == 0.0 {
                    continue;
                }
                for (t, &gv) in gin[i * n + t0..i * n + t0 + len].iter_mut().zip(g) {
                    *t += w * gv;
                }
            }
        }
    }
    (gin, gw, gb)
}

/// Offsets of a `(2r+1)^3` neighbourhood, x fastest.
pub(crate) fn offsets(radius: usize) -> Vec<[isize; 3]> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                out.push([dx, dy, dz]);
            }
        }
    }
    out
}

#[inline]
fn clamp_idx(p: isize, n: usize) -> usize {
    p.clamp(0, n as isize - 1) as usize
}

/// Visits every row as `(row start, start of the row shifted by dy, dz)`.
fn for_each_row(dims: Dims, [_, dy, dz]: [isize; 3], mut f: impl FnMut(usize, usize)) {
    for z in 0..dims.nz {
        let zz = clamp_idx(z as isize + dz, dims.nz);
        for y in 0..dims.ny {
            let yy = clamp_idx(y as isize + dy, dims.ny);
            f((z * dims.ny + y) * dims.nx, (zz * dims.ny + yy) * dims.nx);
        }
    }
}

/// Positions `x` whose shifted index `x + dx` stays inside the row.
#[inline]
fn interior(nx: usize, dx: isize) -> (usize, usize) {
    let lo = (-dx).max(0) as usize;
    let hi = (nx as isize - dx.max(0)).max(lo as isize) as usize;
    (lo.min(nx), hi.min(nx))
}

/// Channel-mean inner product between `a` at each voxel and `b` at every
/// offset of the neighbourhood (border clamp). Output has one channel per
/// offset.
pub(crate) fn correlation(a: &[f64], b: &[f64], channels: usize, dims: Dims, radius: usize) -> Vec<f64> {
    let n = dims.len();
    let nx = dims.nx;
    let offs = offsets(radius);
    let inv = 1.0 / channels as f64;
    let mut out = vec![0.0; offs.len() * n];
    for (o, &off) in offs.iter().enumerate() {
        let dx = off[0];
        let (lo, hi) = interior(nx, dx);
        let acc_all = &mut out[o * n..(o + 1) * n];
        for_each_row(dims, off, |row, src| {
            let acc = &mut acc_all[row..row + nx];
            for c in 0..channels {
                let ar = &a[c * n + row..c * n + row + nx];
                let br = &b[c * n + src..c * n + src + nx];
                for x in (0..lo).chain(hi..nx) {
                    acc[x] += ar[x] * br[clamp_idx(x as isize + dx, nx)];
                }
                let shifted = &br[(lo as isize + dx) as usize..(hi as isize + dx) as usize];
                for ((s, &p), &q) in acc[lo..hi].iter_mut().zip(&ar[lo..hi]).zip(shifted) {
                    *s += p * q;
                }
            }
        });
        acc_all.iter_mut().for_each(|s| *s *= inv);
    }
    out
}

/// Gradients of [`correlation`] with respect to `a` and `b`.
pub(crate) fn correlation_backward(
    a: &[f64],
    b: &[f64],
    channels: usize,
    dims: Dims,
    radius: usize,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = dims.len();
    let nx = dims.nx;
    let inv = 1.0 / channels as f64;
    let mut ga = vec![0.0; channels * n];
    let mut gb = vec![0.0; channels * n];
    for (o, off) in offsets(radius).into_iter().enumerate() {
        let dx = off[0];
        let (lo, hi) = interior(nx, dx);
        let g_all = &grad_out[o * n..(o + 1) * n];
        for_each_row(dims, off, |row, src| {
            let g: Vec<f64> = g_all[row..row + nx].iter().map(|v| v * inv).collect();
            for c in 0..channels {
                let ar = &a[c * n + row..c * n + row + nx];
                let br = &b[c * n + src..c * n + src + nx];
                let gar = &mut ga[c * n + row..c * n + row + nx];
                for x in (0..lo).chain(hi..nx) {
                    gar[x] += g[x] * br[clamp_idx(x as isize + dx, nx)];
                }
                let shifted = &br[(lo as isize + dx) as usize..(hi as isize + dx) as usize];
                for ((t, &gv), &q) in gar[lo..hi].iter_mut().zip(&g[lo..hi]).zip(shifted) {
                    *t += gv * q;
                }
                let gbr = &mut gb[c * n + src..c * n + src + nx];
                for x in (0..lo).chain(hi..nx) {
                    gbr[clamp_idx(x as isize + dx, nx)] += g[x] * ar[x];
                }
                let shifted = &mut gbr[(lo as isize + dx) as usize..(hi as isize + dx) as usize];
                for ((t, &gv), &p) in shifted.iter_mut().zip(&g[lo..hi]).zip(&ar[lo..hi]) {
                    *t += gv * p;
                }
            }
        });
    }
    (ga, gb)
}
