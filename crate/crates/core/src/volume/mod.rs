//! Grid types and the geometric operations on them: warping, field
//! resampling, Jacobian analysis, spacing-aware noise and crop/pad.
//!
//! Displacements are stored in voxel units. A field `u` maps the fixed-frame
//! voxel `x` to the moving-frame sampling location `x + u(x)`.

pub(crate) mod interp;

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid extent in voxels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Self { nx, ny, nz }
    }

    pub const fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.ny + y) * self.nx + x
    }

    pub fn is_divisible_by(&self, factor: usize) -> bool {
        factor > 0 && self.nx % factor == 0 && self.ny % factor == 0 && self.nz % factor == 0
    }

    pub fn scaled_down(&self, factor: usize) -> Dims {
        Dims::new(self.nx / factor, self.ny / factor, self.nz / factor)
    }

    pub fn scaled_up(&self, factor: usize) -> Dims {
        Dims::new(self.nx * factor, self.ny * factor, self.nz * factor)
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

/// Physical voxel size in millimetres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spacing(pub [f64; 3]);

impl Spacing {
    pub fn new(sx: f64, sy: f64, sz: f64) -> Result<Self> {
        let s = Spacing([sx, sy, sz]);
        s.validate()?;
        Ok(s)
    }

    pub fn isotropic() -> Self {
        Spacing([1.0; 3])
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().all(|s| s.is_finite() && *s > 0.0) {
            Ok(())
        } else {
            Err(Error::invalid("spacing", format!("{:?} must be finite and > 0", self.0)))
        }
    }

    pub fn min(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Volume of one voxel in mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.0[0] * self.0[1] * self.0[2]
    }

    /// Per-axis noise standard deviation `5 * min(s) / s_i`, in voxels.
    ///
    /// This gives the same physical noise magnitude (`5 * min(s)` mm) along
    /// every axis.
    pub fn noise_sigma(&self) -> [f64; 3] {
        let m = self.min();
        [5.0 * m / self.0[0], 5.0 * m / self.0[1], 5.0 * m / self.0[2]]
    }
}

/// Scalar intensity image.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: Dims,
    pub spacing: Spacing,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f64>) -> Result<Self> {
        spacing.validate()?;
        if data.len() != dims.len() || dims.is_empty() {
            return Err(Error::invalid(
                "data",
                format!("length {} does not match dims {dims}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("data", "intensities must be finite"));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn zeros(dims: Dims, spacing: Spacing) -> Self {
        Self {
            dims,
            spacing,
            data: vec![0.0; dims.len()],
        }
    }

    pub fn from_fn(dims: Dims, spacing: Spacing, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Self { dims, spacing, data }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Three-channel displacement field in voxel units.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    pub dims: Dims,
    pub spacing: Spacing,
    /// Channel-major: all `u_x`, then all `u_y`, then all `u_z`.
    pub data: Vec<f64>,
}

impl DisplacementField {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f64>) -> Result<Self> {
        spacing.validate()?;
        if data.len() != 3 * dims.len() || dims.is_empty() {
            return Err(Error::invalid(
                "data",
                format!("length {} does not match 3 x {dims}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("data", "displacements must be finite"));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn zeros(dims: Dims, spacing: Spacing) -> Self {
        Self {
            dims,
            spacing,
            data: vec![0.0; 3 * dims.len()],
        }
    }

    pub fn constant(dims: Dims, spacing: Spacing, u: [f64; 3]) -> Self {
        let n = dims.len();
        let mut data = Vec::with_capacity(3 * n);
        for c in u {
            data.extend(std::iter::repeat(c).take(n));
        }
        Self { dims, spacing, data }
    }

    pub fn from_fn(dims: Dims, spacing: Spacing, mut f: impl FnMut(usize, usize, usize) -> [f64; 3]) -> Self {
        let n = dims.len();
        let mut data = vec![0.0; 3 * n];
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    let v = dims.index(x, y, z);
                    let u = f(x, y, z);
                    data[v] = u[0];
                    data[n + v] = u[1];
                    data[2 * n + v] = u[2];
                }
            }
        }
        Self { dims, spacing, data }
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.dims.len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.dims.len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        let n = self.dims.len();
        let v = self.dims.index(x, y, z);
        [self.data[v], self.data[n + v], self.data[2 * n + v]]
    }

    /// `self + alpha * other`, componentwise.
    pub fn axpy(&self, alpha: f64, other: &DisplacementField) -> DisplacementField {
        debug_assert_eq!(self.dims, other.dims);
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + alpha * b)
            .collect();
        DisplacementField {
            dims: self.dims,
            spacing: self.spacing,
            data,
        }
    }

    pub fn scale(&self, alpha: f64) -> DisplacementField {
        DisplacementField {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|a| alpha * a).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &DisplacementField) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Segmentation classes used by the cardiac phantoms and the metrics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Class {
    Background = 0,
    Rv = 1,
    Myo = 2,
    Lv = 3,
}

impl Class {
    pub const FOREGROUND: [Class; 3] = [Class::Rv, Class::Myo, Class::Lv];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Class> {
        match code {
            0 => Some(Class::Background),
            1 => Some(Class::Rv),
            2 => Some(Class::Myo),
            3 => Some(Class::Lv),
            _ => None,
        }
    }
}

/// Integer segmentation on the image grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub dims: Dims,
    pub spacing: Spacing,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<u8>) -> Result<Self> {
        spacing.validate()?;
        if data.len() != dims.len() || dims.is_empty() {
            return Err(Error::invalid(
                "data",
                format!("length {} does not match dims {dims}", data.len()),
            ));
        }
        if let Some(bad) = data.iter().find(|&&c| Class::from_code(c).is_none()) {
            return Err(Error::invalid("data", format!("unknown class code {bad}")));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn from_fn(dims: Dims, spacing: Spacing, mut f: impl FnMut(usize, usize, usize) -> Class) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    data.push(f(x, y, z).code());
                }
            }
        }
        Self { dims, spacing, data }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn count(&self, class: Class) -> usize {
        let code = class.code();
        self.data.iter().filter(|&&c| c == code).count()
    }
}

pub(crate) fn check_dims(what: &'static str, expected: Dims, actual: Dims) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Shape {
            what,
            expected,
            actual,
        })
    }
}

pub(crate) use check_dims as ensure_same_dims;

/// Trilinear interpolation at a continuous voxel coordinate, border clamp.
pub fn trilinear_sample(vol: &Volume, p: [f64; 3]) -> f64 {
    let d = vol.dims;
    interp::sample(
        &vol.data,
        d,
        interp::axis_cell(p[0], d.nx),
        interp::axis_cell(p[1], d.ny),
        interp::axis_cell(p[2], d.nz),
    )
}

/// Resamples `moving` at `x + u(x)` for every fixed-frame voxel `x`.
pub fn warp_image(moving: &Volume, ddf: &DisplacementField) -> Result<Volume> {
    check_dims("warp_image field", moving.dims, ddf.dims)?;
    let data = interp::warp_channels(&moving.data, 1, moving.dims, &ddf.data);
    Ok(Volume {
        dims: moving.dims,
        spacing: moving.spacing,
        data,
    })
}

/// Nearest-neighbour label resampling at `x + u(x)`, border clamp.
pub fn warp_labels(labels: &LabelMap, ddf: &DisplacementField) -> Result<LabelMap> {
    check_dims("warp_labels field", labels.dims, ddf.dims)?;
    let d = labels.dims;
    let nearest = |p: f64, n: usize| p.round().clamp(0.0, (n - 1) as f64) as usize;
    let mut data = Vec::with_capacity(d.len());
    for z in 0..d.nz {
        for y in 0..d.ny {
            for x in 0..d.nx {
                let u = ddf.at(x, y, z);
                let sx = nearest(x as f64 + u[0], d.nx);
                let sy = nearest(y as f64 + u[1], d.ny);
                let sz = nearest(z as f64 + u[2], d.nz);
                data.push(labels.at(sx, sy, sz));
            }
        }
    }
    Ok(LabelMap {
        dims: d,
        spacing: labels.spacing,
        data,
    })
}

/// Finite-difference derivative of one channel along `axis` at a voxel:
/// central inside, one-sided on the faces.
#[inline]
fn diff(ch: &[f64], d: Dims, x: usize, y: usize, z: usize, axis: usize) -> f64 {
    let (pos, n) = match axis {
        0 => (x, d.nx),
        1 => (y, d.ny),
        _ => (z, d.nz),
    };
    let at = |p: usize| match axis {
        0 => ch[d.index(p, y, z)],
        1 => ch[d.index(x, p, z)],
        _ => ch[d.index(x, y, p)],
    };
    if n < 2 {
        0.0
    } else if pos == 0 {
        at(1) - at(0)
    } else if pos == n - 1 {
        at(n - 1) - at(n - 2)
    } else {
        0.5 * (at(pos + 1) - at(pos - 1))
    }
}

/// Determinant of `I + du/dx` at every voxel (voxel units, no spacing).
pub fn jacobian_map(ddf: &DisplacementField) -> Volume {
    let d = ddf.dims;
    let chans = [ddf.channel(0), ddf.channel(1), ddf.channel(2)];
    Volume::from_fn(d, ddf.spacing, |x, y, z| {
        let mut m = [[0.0; 3]; 3];
        for (r, ch) in chans.iter().enumerate() {
            for (c, entry) in m[r].iter_mut().enumerate() {
                *entry = diff(ch, d, x, y, z, c) + if r == c { 1.0 } else { 0.0 };
            }
        }
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    })
}

/// Zero-mean Gaussian field with per-axis standard deviation
/// `5 * min(s) / s_i` voxels.
pub fn sample_noise_field<R: Rng + ?Sized>(dims: Dims, spacing: Spacing, rng: &mut R) -> DisplacementField {
    let sigma = spacing.noise_sigma();
    let n = dims.len();
    let mut data = Vec::with_capacity(3 * n);
    for s in sigma {
        for _ in 0..n {
            let z: f64 = rng.sample(StandardNormal);
            data.push(s * z);
        }
    }
    DisplacementField { dims, spacing, data }
}

fn check_factor(factor: usize) -> Result<()> {
    if factor.is_power_of_two() {
        Ok(())
    } else {
        Err(Error::invalid("factor", format!("{factor} is not a power of two")))
    }
}

/// Block-average pooling to a grid `factor` times coarser; displacements are
/// divided by `factor` so they stay in (coarse) voxel units.
pub fn downsample_field(ddf: &DisplacementField, factor: usize) -> Result<DisplacementField> {
    check_factor(factor)?;
    if !ddf.dims.is_divisible_by(factor) {
        return Err(Error::Divisibility {
            dims: ddf.dims,
            factor,
        });
    }
    let mut data = interp::block_mean_channels(&ddf.data, 3, ddf.dims, factor);
    let inv = 1.0 / factor as f64;
    data.iter_mut().for_each(|v| *v *= inv);
    Ok(DisplacementField {
        dims: ddf.dims.scaled_down(factor),
        spacing: Spacing(ddf.spacing.0.map(|s| s * factor as f64)),
        data,
    })
}

/// Trilinear upsampling to a grid `factor` times finer; displacements are
/// multiplied by `factor`.
pub fn upsample_field(ddf: &DisplacementField, factor: usize) -> Result<DisplacementField> {
    check_factor(factor)?;
    let mut data = interp::upsample_channels(&ddf.data, 3, ddf.dims, factor);
    let s = factor as f64;
    data.iter_mut().for_each(|v| *v *= s);
    Ok(DisplacementField {
        dims: ddf.dims.scaled_up(factor),
        spacing: Spacing(ddf.spacing.0.map(|sp| sp / s)),
        data,
    })
}

/// Symmetric crop or pad to `target`. When padding, the fill is `pad`.
/// An odd remainder puts the extra voxel on the high side.
fn crop_or_pad<T: Copy>(src: &[T], dims: Dims, target: Dims, pad: T) -> Vec<T> {
    // Signed offset from target index to source index per axis.
    let off = |n: usize, t: usize| -> isize {
        if n >= t {
            ((n - t) / 2) as isize
        } else {
            -(((t - n) / 2) as isize)
        }
    };
    let (ox, oy, oz) = (off(dims.nx, target.nx), off(dims.ny, target.ny), off(dims.nz, target.nz));
    let mut out = Vec::with_capacity(target.len());
    for z in 0..target.nz {
        for y in 0..target.ny {
            for x in 0..target.nx {
                let (sx, sy, sz) = (x as isize + ox, y as isize + oy, z as isize + oz);
                let inside = (0..dims.nx as isize).contains(&sx)
                    && (0..dims.ny as isize).contains(&sy)
                    && (0..dims.nz as isize).contains(&sz);
                out.push(if inside {
                    src[dims.index(sx as usize, sy as usize, sz as usize)]
                } else {
                    pad
                });
            }
        }
    }
    out
}

/// Grids that can be centre-cropped or padded to a target extent.
pub trait CenterCropOrPad: Sized {
    fn center_crop_or_pad(&self, target: Dims) -> Result<Self>;
}

fn check_target(target: Dims) -> Result<()> {
    if target.is_empty() {
        Err(Error::invalid("target", format!("dims {target} must be positive")))
    } else {
        Ok(())
    }
}

impl CenterCropOrPad for Volume {
    /// Pads with the minimum intensity.
    fn center_crop_or_pad(&self, target: Dims) -> Result<Self> {
        check_target(target)?;
        Ok(Volume {
            dims: target,
            spacing: self.spacing,
            data: crop_or_pad(&self.data, self.dims, target, self.min_value()),
        })
    }
}

impl CenterCropOrPad for LabelMap {
    /// Pads with background.
    fn center_crop_or_pad(&self, target: Dims) -> Result<Self> {
        check_target(target)?;
        Ok(LabelMap {
            dims: target,
            spacing: self.spacing,
            data: crop_or_pad(&self.data, self.dims, target, Class::Background.code()),
        })
    }
}
