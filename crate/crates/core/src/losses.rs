//! Registration loss: local normalized cross-correlation on the warped image
//! plus an L2 penalty on forward differences of the displacement field,
//! together with its exact gradient with respect to the field.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{ensure_same_dims, interp, warp_image, Dims, DisplacementField, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NccKind {
    /// `cross^2 / (var_a var_b + eps)`, in `[0, 1]`.
    Squared,
    /// `cross / sqrt(var_a var_b + eps)`, in `[-1, 1]`.
    Signed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Side of the cubic NCC window, odd.
    pub ncc_window: usize,
    pub eps: f64,
    pub grad_weight: f64,
    pub ncc_kind: NccKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            ncc_window: 9,
            eps: 1e-5,
            grad_weight: 1.0,
            ncc_kind: NccKind::Squared,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ncc_window < 3 || self.ncc_window % 2 == 0 {
            return Err(Error::invalid("ncc_window", format!("{} must be odd and >= 3", self.ncc_window)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("eps", "must be > 0"));
        }
        if !(self.grad_weight >= 0.0) {
            return Err(Error::invalid("grad_weight", "must be >= 0"));
        }
        Ok(())
    }

    fn radius(&self) -> usize {
        self.ncc_window / 2
    }
}

/// Sum over the cube `[p - r, p + r]^3` truncated to the grid, for every `p`.
fn box_sum(src: &[f64], d: Dims, r: usize) -> Vec<f64> {
    fn pass(src: &[f64], d: Dims, r: usize, axis: usize) -> Vec<f64> {
        let n = [d.nx, d.ny, d.nz][axis];
        let stride = [1, d.nx, d.nx * d.ny][axis];
        let mut out = vec![0.0; src.len()];
        let mut prefix = vec![0.0; n + 1];
        for z in 0..if axis == 2 { 1 } else { d.nz } {
            for y in 0..if axis == 1 { 1 } else { d.ny } {
                for x in 0..if axis == 0 { 1 } else { d.nx } {
                    let base = d.index(x, y, z);
                    for i in 0..n {
                        prefix[i + 1] = prefix[i] + src[base + i * stride];
                    }
                    for i in 0..n {
                        let lo = i.saturating_sub(r);
                        let hi = (i + r + 1).min(n);
                        out[base + i * stride] = prefix[hi] - prefix[lo];
                    }
                }
            }
        }
        out
    }
    let a = pass(src, d, r, 0);
    let b = pass(&a, d, r, 1);
    pass(&b, d, r, 2)
}

fn window_counts(d: Dims, r: usize) -> Vec<f64> {
    let span = |i: usize, n: usize| ((i + r + 1).min(n) - i.saturating_sub(r)) as f64;
    let mut out = Vec::with_capacity(d.len());
    for z in 0..d.nz {
        for y in 0..d.ny {
            for x in 0..d.nx {
                out.push(span(x, d.nx) * span(y, d.ny) * span(z, d.nz));
            }
        }
    }
    out
}

struct NccTerms {
    count: Vec<f64>,
    sum_a: Vec<f64>,
    sum_b: Vec<f64>,
    cross: Vec<f64>,
    var_a: Vec<f64>,
    var_b: Vec<f64>,
}

fn ncc_terms(a: &[f64], b: &[f64], d: Dims, r: usize) -> NccTerms {
    let count = window_counts(d, r);
    let sum_a = box_sum(a, d, r);
    let sum_b = box_sum(b, d, r);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let sum_aa = box_sum(&prod(a, a), d, r);
    let sum_bb = box_sum(&prod(b, b), d, r);
    let sum_ab = box_sum(&prod(a, b), d, r);
    let n = d.len();
    let mut cross = vec![0.0; n];
    let mut var_a = vec![0.0; n];
    let mut var_b = vec![0.0; n];
    for p in 0..n {
        let k = count[p];
        cross[p] = sum_ab[p] - sum_a[p] * sum_b[p] / k;
        var_a[p] = (sum_aa[p] - sum_a[p] * sum_a[p] / k).max(0.0);
        var_b[p] = (sum_bb[p] - sum_b[p] * sum_b[p] / k).max(0.0);
    }
    NccTerms {
        count,
        sum_a,
        sum_b,
        cross,
        var_a,
        var_b,
    }
}

fn local_ncc(t: &NccTerms, p: usize, cfg: &LossConfig) -> f64 {
    let denom = t.var_a[p] * t.var_b[p] + cfg.eps;
    match cfg.ncc_kind {
        NccKind::Squared => t.cross[p] * t.cross[p] / denom,
        NccKind::Signed => t.cross[p] / denom.sqrt(),
    }
}

/// Negated mean local NCC between `warped` and `fixed`.
pub fn ncc_loss(warped: &Volume, fixed: &Volume, cfg: &LossConfig) -> Result<f64> {
    ensure_same_dims("ncc_loss", fixed.dims, warped.dims)?;
    cfg.validate()?;
    let t = ncc_terms(&warped.data, &fixed.data, warped.dims, cfg.radius());
    let n = warped.dims.len();
    let total: f64 = (0..n).map(|p| local_ncc(&t, p, cfg)).sum();
    Ok(-total / n as f64)
}

/// Gradient of [`ncc_loss`] with respect to the warped image.
fn ncc_loss_grad(warped: &[f64], fixed: &[f64], d: Dims, cfg: &LossConfig) -> Vec<f64> {
    let r = cfg.radius();
    let t = ncc_terms(warped, fixed, d, r);
    let n = d.len();
    let scale = -1.0 / n as f64;
    // d cc_p / d cross_p = alpha_p, d cc_p / d var_a_p = beta_p
    let mut alpha = vec![0.0; n];
    let mut beta = vec![0.0; n];
    for p in 0..n {
        let denom = t.var_a[p] * t.var_b[p] + cfg.eps;
        match cfg.ncc_kind {
            NccKind::Squared => {
                alpha[p] = 2.0 * t.cross[p] / denom;
                beta[p] = -t.cross[p] * t.cross[p] * t.var_b[p] / (denom * denom);
            }
            NccKind::Signed => {
                let s = denom.sqrt();
                alpha[p] = 1.0 / s;
                beta[p] = -0.5 * t.cross[p] * t.var_b[p] / (denom * s);
            }
        }
    }
    // dcross_p/da_q = b_q - S_b,p / n_p ; dvar_a,p/da_q = 2 a_q - 2 S_a,p / n_p
    let alpha_mb: Vec<f64> = (0..n).map(|p| alpha[p] * t.sum_b[p] / t.count[p]).collect();
    let beta_ma: Vec<f64> = (0..n).map(|p| beta[p] * t.sum_a[p] / t.count[p]).collect();
    let s_alpha = box_sum(&alpha, d, r);
    let s_beta = box_sum(&beta, d, r);
    let s_alpha_mb = box_sum(&alpha_mb, d, r);
    let s_beta_ma = box_sum(&beta_ma, d, r);
    (0..n)
        .map(|q| {
            scale * (fixed[q] * s_alpha[q] - s_alpha_mb[q] + 2.0 * warped[q] * s_beta[q] - 2.0 * s_beta_ma[q])
        })
        .collect()
}

/// Mean over channels and axes of squared forward differences, each
/// channel-axis term averaged over its valid differences.
pub fn grad_loss(ddf: &DisplacementField) -> Result<f64> {
    let d = ddf.dims;
    if d.nx < 2 || d.ny < 2 || d.nz < 2 {
        return Err(Error::invalid("ddf", format!("dims {d} must be >= 2 per axis")));
    }
    let mut total = 0.0;
    for c in 0..3 {
        let ch = ddf.channel(c);
        for axis in 0..3 {
            total += axis_diff_sq_mean(ch, d, axis);
        }
    }
    Ok(total / 9.0)
}

fn axis_step(d: Dims, axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, d.nx),
        1 => (d.nx, d.ny),
        _ => (d.nx * d.ny, d.nz),
    }
}

fn axis_diff_sq_mean(ch: &[f64], d: Dims, axis: usize) -> f64 {
    let (stride, n) = axis_step(d, axis);
    let count = d.len() / n * (n - 1);
    let mut sum = 0.0;
    for v in 0..ch.len() {
        if (v / stride) % n + 1 < n {
            let diff = ch[v + stride] - ch[v];
            sum += diff * diff;
        }
    }
    sum / count as f64
}

fn grad_loss_grad(ddf: &DisplacementField) -> Vec<f64> {
    let d = ddf.dims;
    let n = d.len();
    let mut out = vec![0.0; 3 * n];
    for c in 0..3 {
        let ch = ddf.channel(c);
        let g = &mut out[c * n..(c + 1) * n];
        for axis in 0..3 {
            let (stride, len) = axis_step(d, axis);
            let count = (n / len * (len - 1)) as f64;
            let k = 2.0 / (9.0 * count);
            for v in 0..n {
                if (v / stride) % len + 1 < len {
                    let diff = ch[v + stride] - ch[v];
                    g[v + stride] += k * diff;
                    g[v] -= k * diff;
                }
            }
        }
    }
    out
}

/// `ncc_loss(moving o ddf, fixed) + grad_weight * grad_loss(ddf)`.
pub fn reg_loss(moving: &Volume, fixed: &Volume, ddf: &DisplacementField, cfg: &LossConfig) -> Result<f64> {
    ensure_same_dims("reg_loss fixed", moving.dims, fixed.dims)?;
    let warped = warp_image(moving, ddf)?;
    let mut loss = ncc_loss(&warped, fixed, cfg)?;
    if cfg.grad_weight != 0.0 {
        loss += cfg.grad_weight * grad_loss(ddf)?;
    }
    Ok(loss)
}

/// Exact gradient of [`reg_loss`] with respect to every displacement
/// component.
pub fn reg_loss_grad_ddf(
    moving: &Volume,
    fixed: &Volume,
    ddf: &DisplacementField,
    cfg: &LossConfig,
) -> Result<DisplacementField> {
    Ok(reg_loss_and_grad(moving, fixed, ddf, cfg)?.1)
}

/// Loss value and its field gradient from one shared forward pass.
pub fn reg_loss_and_grad(
    moving: &Volume,
    fixed: &Volume,
    ddf: &DisplacementField,
    cfg: &LossConfig,
) -> Result<(f64, DisplacementField)> {
    ensure_same_dims("reg_loss fixed", moving.dims, fixed.dims)?;
    let warped = warp_image(moving, ddf)?;
    let mut loss = ncc_loss(&warped, fixed, cfg)?;
    let g_img = ncc_loss_grad(&warped.data, &fixed.data, fixed.dims, cfg);
    let (_, mut g) = interp::warp_channels_backward(&moving.data, 1, moving.dims, &ddf.data, &g_img, false);
    if cfg.grad_weight != 0.0 {
        loss += cfg.grad_weight * grad_loss(ddf)?;
        for (a, b) in g.iter_mut().zip(grad_loss_grad(ddf)) {
            *a += cfg.grad_weight * b;
        }
    }
    Ok((
        loss,
        DisplacementField {
            dims: ddf.dims,
            spacing: ddf.spacing,
            data: g,
        },
    ))
}
