//! Trilinear resampling kernels over channel-major grids.
//!
//! Everything here works on raw `&[f64]` buffers laid out `[channel][z][y][x]`
//! so the same kernels serve images, displacement fields and network
//! feature maps. Out-of-grid coordinates are clamped to the border.

use super::Dims;

/// Interpolation cell along one axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisCell {
    pub i0: usize,
    pub i1: usize,
    pub f: f64,
    /// False when the coordinate was clamped, i.e. the sample is locally
    /// constant along this axis.
    pub active: bool,
}

#[inline]
pub(crate) fn axis_cell(p: f64, n: usize) -> AxisCell {
    let hi = (n - 1) as f64;
    let active = n > 1 && p >= 0.0 && p <= hi;
    let q = p.clamp(0.0, hi);
    let i0 = (q.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    AxisCell {
        i0,
        i1,
        f: q - i0 as f64,
        active,
    }
}

#[inline]
fn lerp(a: f64, b: f64, f: f64) -> f64 {
    a + f * (b - a)
}

/// Trilinear value of one channel at a continuous voxel position.
#[inline]
pub(crate) fn sample(ch: &[f64], dims: Dims, cx: AxisCell, cy: AxisCell, cz: AxisCell) -> f64 {
    let (nx, ny) = (dims.nx, dims.ny);
    let at = |x: usize, y: usize, z: usize| ch[(z * ny + y) * nx + x];
    let c00 = lerp(at(cx.i0, cy.i0, cz.i0), at(cx.i1, cy.i0, cz.i0), cx.f);
    let c10 = lerp(at(cx.i0, cy.i1, cz.i0), at(cx.i1, cy.i1, cz.i0), cx.f);
    let c01 = lerp(at(cx.i0, cy.i0, cz.i1), at(cx.i1, cy.i0, cz.i1), cx.f);
    let c11 = lerp(at(cx.i0, cy.i1, cz.i1), at(cx.i1, cy.i1, cz.i1), cx.f);
    lerp(lerp(c00, c10, cy.f), lerp(c01, c11, cy.f), cz.f)
}

/// Corner indices and weights of a trilinear stencil, x-fastest corner order.
#[inline]
fn corners(dims: Dims, cx: AxisCell, cy: AxisCell, cz: AxisCell) -> ([usize; 8], [f64; 8]) {
    let (nx, ny) = (dims.nx, dims.ny);
    let xs = [(cx.i0, 1.0 - cx.f), (cx.i1, cx.f)];
    let ys = [(cy.i0, 1.0 - cy.f), (cy.i1, cy.f)];
    let zs = [(cz.i0, 1.0 - cz.f), (cz.i1, cz.f)];
    let mut idx = [0usize; 8];
    let mut w = [0.0; 8];
    let mut k = 0;
    for &(z, wz) in &zs {
        for &(y, wy) in &ys {
            for &(x, wx) in &xs {
                idx[k] = (z * ny + y) * nx + x;
                w[k] = wx * wy * wz;
                k += 1;
            }
        }
    }
    (idx, w)
}

/// Spatial gradient of the trilinear interpolant inside the chosen cell.
/// Clamped axes contribute zero.
#[inline]
pub(crate) fn sample_grad(
    ch: &[f64],
    dims: Dims,
    cx: AxisCell,
    cy: AxisCell,
    cz: AxisCell,
) -> [f64; 3] {
    let (nx, ny) = (dims.nx, dims.ny);
    let at = |x: usize, y: usize, z: usize| ch[(z * ny + y) * nx + x];
    let v000 = at(cx.i0, cy.i0, cz.i0);
    let v100 = at(cx.i1, cy.i0, cz.i0);
    let v010 = at(cx.i0, cy.i1, cz.i0);
    let v110 = at(cx.i1, cy.i1, cz.i0);
    let v001 = at(cx.i0, cy.i0, cz.i1);
    let v101 = at(cx.i1, cy.i0, cz.i1);
    let v011 = at(cx.i0, cy.i1, cz.i1);
    let v111 = at(cx.i1, cy.i1, cz.i1);
    let (fx, fy, fz) = (cx.f, cy.f, cz.f);
    let gx = if cx.active {
        (1.0 - fy) * (1.0 - fz) * (v100 - v000)
            + fy * (1.0 - fz) * (v110 - v010)
            + (1.0 - fy) * fz * (v101 - v001)
            + fy * fz * (v111 - v011)
    } else {
        0.0
    };
    let gy = if cy.active {
        (1.0 - fx) * (1.0 - fz) * (v010 - v000)
            + fx * (1.0 - fz) * (v110 - v100)
            + (1.0 - fx) * fz * (v011 - v001)
            + fx * fz * (v111 - v101)
    } else {
        0.0
    };
    let gz = if cz.active {
        (1.0 - fx) * (1.0 - fy) * (v001 - v000)
            + fx * (1.0 - fy) * (v101 - v100)
            + (1.0 - fx) * fy * (v011 - v010)
            + fx * fy * (v111 - v110)
    } else {
        0.0
    };
    [gx, gy, gz]
}

#[inline]
fn cells_at(dims: Dims, field: &[f64], n: usize, v: usize, x: usize, y: usize, z: usize) -> [AxisCell; 3] {
    [
        axis_cell(x as f64 + field[v], dims.nx),
        axis_cell(y as f64 + field[n + v], dims.ny),
        axis_cell(z as f64 + field[2 * n + v], dims.nz),
    ]
}

/// Warps every channel of `src` by sampling at `x + u(x)`.
pub(crate) fn warp_channels(src: &[f64], channels: usize, dims: Dims, field: &[f64]) -> Vec<f64> {
    let n = dims.len();
    debug_assert_eq!(src.len(), channels * n);
    debug_assert_eq!(field.len(), 3 * n);
    let mut out = vec![0.0; channels * n];
    let mut v = 0;
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let [cx, cy, cz] = cells_at(dims, field, n, v, x, y, z);
                for c in 0..channels {
                    out[c * n + v] = sample(&src[c * n..(c + 1) * n], dims, cx, cy, cz);
                }
                v += 1;
            }
        }
    }
    out
}

/// Reverse-mode pass of [`warp_channels`].
///
/// Returns the gradient with respect to the source channels (when
/// `want_src`) and with respect to the three displacement channels.
pub(crate) fn warp_channels_backward(
    src: &[f64],
    channels: usize,
    dims: Dims,
    field: &[f64],
    grad_out: &[f64],
    want_src: bool,
) -> (Option<Vec<f64>>, Vec<f64>) {
    let n = dims.len();
    let mut grad_src = want_src.then(|| vec![0.0; channels * n]);
    let mut grad_field = vec![0.0; 3 * n];
    let mut v = 0;
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let [cx, cy, cz] = cells_at(dims, field, n, v, x, y, z);
                let (idx, w) = if want_src {
                    corners(dims, cx, cy, cz)
                } else {
                    ([0; 8], [0.0; 8])
                };
                let mut gf = [0.0; 3];
                for c in 0..channels {
                    let g = grad_out[c * n + v];
                    if g == 0.0 {
                        continue;
                    }
                    let ch = &src[c * n..(c + 1) * n];
                    let d = sample_grad(ch, dims, cx, cy, cz);
                    gf[0] += g * d[0];
                    gf[1] += g * d[1];
                    gf[2] += g * d[2];
                    if let Some(gs) = grad_src.as_mut() {
                        let gs = &mut gs[c * n..(c + 1) * n];
                        for k in 0..8 {
                            gs[idx[k]] += g * w[k];
                        }
                    }
                }
                grad_field[v] = gf[0];
                grad_field[n + v] = gf[1];
                grad_field[2 * n + v] = gf[2];
                v += 1;
            }
        }
    }
    (grad_src, grad_field)
}

/// Per-axis lookup for half-pixel upsampling by an integer factor.
fn upsample_table(coarse: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..coarse * factor)
        .map(|i| {
            let p = (i as f64 + 0.5) / factor as f64 - 0.5;
            let c = axis_cell(p, coarse);
            (c.i0, c.i1, c.f)
        })
        .collect()
}

/// Trilinear upsampling of every channel (voxel centres aligned, border
/// clamp). Values are not rescaled.
pub(crate) fn upsample_channels(src: &[f64], channels: usize, coarse: Dims, factor: usize) -> Vec<f64> {
    let fine = coarse.scaled_up(factor);
    let (tx, ty, tz) = (
        upsample_table(coarse.nx, factor),
        upsample_table(coarse.ny, factor),
        upsample_table(coarse.nz, factor),
    );
    let (nc, nf) = (coarse.len(), fine.len());
    let mut out = vec![0.0; channels * nf];
    for c in 0..channels {
        let s = &src[c * nc..(c + 1) * nc];
        let o = &mut out[c * nf..(c + 1) * nf];
        let mut v = 0;
        for &(z0, z1, fz) in &tz {
            for &(y0, y1, fy) in &ty {
                for &(x0, x1, fx) in &tx {
                    let cx = |xx: usize, yy: usize, zz: usize| s[(zz * coarse.ny + yy) * coarse.nx + xx];
                    let c00 = lerp(cx(x0, y0, z0), cx(x1, y0, z0), fx);
                    let c10 = lerp(cx(x0, y1, z0), cx(x1, y1, z0), fx);
                    let c01 = lerp(cx(x0, y0, z1), cx(x1, y0, z1), fx);
                    let c11 = lerp(cx(x0, y1, z1), cx(x1, y1, z1), fx);
                    o[v] = lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz);
                    v += 1;
                }
            }
        }
    }
    out
}

/// Transpose of [`upsample_channels`].
pub(crate) fn upsample_channels_backward(
    grad_fine: &[f64],
    channels: usize,
    coarse: Dims,
    factor: usize,
) -> Vec<f64> {
    let fine = coarse.scaled_up(factor);
    let (tx, ty, tz) = (
        upsample_table(coarse.nx, factor),
        upsample_table(coarse.ny, factor),
        upsample_table(coarse.nz, factor),
    );
    let (nc, nf) = (coarse.len(), fine.len());
    let mut out = vec![0.0; channels * nc];
    for c in 0..channels {
        let g = &grad_fine[c * nf..(c + 1) * nf];
        let o = &mut out[c * nc..(c + 1) * nc];
        let mut v = 0;
        for &(z0, z1, fz) in &tz {
            for &(y0, y1, fy) in &ty {
                for &(x0, x1, fx) in &tx {
                    let gv = g[v];
                    v += 1;
                    for (zz, wz) in [(z0, 1.0 - fz), (z1, fz)] {
                        for (yy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                            let row = (zz * coarse.ny + yy) * coarse.nx;
                            let w = gv * wy * wz;
                            o[row + x0] += w * (1.0 - fx);
                            o[row + x1] += w * fx;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Block-average pooling of every channel by an integer factor.
pub(crate) fn block_mean_channels(src: &[f64], channels: usize, fine: Dims, factor: usize) -> Vec<f64> {
    let coarse = Dims::new(fine.nx / factor, fine.ny / factor, fine.nz / factor);
    let (nc, nf) = (coarse.len(), fine.len());
    let mut out = vec![0.0; channels * nc];
    let inv = 1.0 / (factor * factor * factor) as f64;
    for c in 0..channels {
        let s = &src[c * nf..(c + 1) * nf];
        let o = &mut out[c * nc..(c + 1) * nc];
        for z in 0..fine.nz {
            for y in 0..fine.ny {
                let row = (z * fine.ny + y) * fine.nx;
                let orow = ((z / factor) * coarse.ny + y / factor) * coarse.nx;
                for x in 0..fine.nx {
                    o[orow + x / factor] += s[row + x];
                }
            }
        }
        for v in o.iter_mut() {
            *v *= inv;
        }
    }
    out
}
