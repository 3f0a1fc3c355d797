//! Synthetic short-axis cardiac phantoms: an LV annulus with an RV crescent,
//! contracted radially in-plane to produce the end-systolic frame.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::hash::{Hash, Hasher};
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::fvol;
use crate::volume::{Class, Dims, DisplacementField, LabelMap, Spacing, Volume};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TissueLevels {
    pub background: f64,
    pub myocardium: f64,
    pub blood: f64,
}

impl TissueLevels {
    fn of(&self, class: Class) -> f64 {
        match class {
            Class::Background => self.background,
            Class::Myo => self.myocardium,
            Class::Lv | Class::Rv => self.blood,
        }
    }
}

/// Sampling ranges are `[min, max]` pairs; lengths are in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub dims: Dims,
    pub spacing: Spacing,
    pub lv_radius_mm: [f64; 2],
    pub myo_thickness_mm: [f64; 2],
    pub rv_radius_mm: [f64; 2],
    /// RV disk centre sits at `r_epi + rv_overlap * r_rv` from the LV centre.
    pub rv_overlap: [f64; 2],
    pub rv_angle_deg: [f64; 2],
    /// In-plane radial scale of the heart at end-systole.
    pub contraction: [f64; 2],
    /// Relative radius loss at the outermost slices.
    pub taper: [f64; 2],
    pub center_jitter_mm: f64,
    pub center_drift_mm: f64,
    pub levels: TissueLevels,
    pub blur_sigma_vox: f64,
    pub noise_std: f64,
    /// Distance from the heart's outer edge to where the contraction starts
    /// to fade.
    pub support_margin_mm: f64,
    pub transition_mm: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: Dims::new(64, 64, 16),
            spacing: Spacing([1.5, 1.5, 3.15]),
            lv_radius_mm: [12.0, 15.0],
            myo_thickness_mm: [11.0, 13.0],
            rv_radius_mm: [14.0, 18.0],
            rv_overlap: [0.3, 0.5],
            rv_angle_deg: [0.0, 360.0],
            contraction: [0.65, 0.85],
            taper: [0.0, 0.15],
            center_jitter_mm: 2.0,
            center_drift_mm: 3.0,
            levels: TissueLevels {
                background: 0.05,
                myocardium: 0.35,
                blood: 0.85,
            },
            blur_sigma_vox: 0.75,
            noise_std: 0.02,
            support_margin_mm: 3.0,
            transition_mm: 15.0,
            seed: 0,
        }
    }
}

fn check_range(name: &'static str, r: [f64; 2], positive: bool) -> Result<()> {
    let ok = r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] && (!positive || r[0] > 0.0);
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("bad range [{}, {}]", r[0], r[1])))
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        self.spacing.validate()?;
        if self.dims.is_empty() {
            return Err(Error::invalid("dims", "must be non-empty"));
        }
        check_range("lv_radius_mm", self.lv_radius_mm, true)?;
        check_range("myo_thickness_mm", self.myo_thickness_mm, true)?;
        check_range("rv_radius_mm", self.rv_radius_mm, true)?;
        check_range("rv_overlap", self.rv_overlap, false)?;
        check_range("rv_angle_deg", self.rv_angle_deg, false)?;
        check_range("contraction", self.contraction, true)?;
        check_range("taper", self.taper, false)?;
        if self.contraction[1] > 1.0 {
            return Err(Error::invalid("contraction", "must lie in (0, 1]"));
        }
        if self.rv_overlap[0] < 0.0 || self.rv_overlap[1] >= 1.0 {
            return Err(Error::invalid("rv_overlap", "must lie in [0, 1)"));
        }
        if self.taper[0] < 0.0 || self.taper[1] >= 1.0 {
            return Err(Error::invalid("taper", "must lie in [0, 1)"));
        }
        for (name, v) in [
            ("center_jitter_mm", self.center_jitter_mm),
            ("center_drift_mm", self.center_drift_mm),
            ("blur_sigma_vox", self.blur_sigma_vox),
            ("noise_std", self.noise_std),
            ("support_margin_mm", self.support_margin_mm),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, format!("{v} is not a finite non-negative number")));
            }
        }
        if !(self.transition_mm > 0.0 && self.transition_mm.is_finite()) {
            return Err(Error::invalid("transition_mm", "must be positive"));
        }
        Ok(())
    }

    /// Draws one geometry from the configured ranges.
    pub fn draw_params<R: Rng + ?Sized>(&self, rng: &mut R) -> PhantomParams {
        let mut pick = |r: [f64; 2]| if r[0] == r[1] { r[0] } else { rng.gen_range(r[0]..r[1]) };
        let lv_radius_mm = pick(self.lv_radius_mm);
        let myo_thickness_mm = pick(self.myo_thickness_mm);
        let rv_radius_mm = pick(self.rv_radius_mm);
        let rv_overlap = pick(self.rv_overlap);
        let rv_angle_rad = pick(self.rv_angle_deg).to_radians();
        let contraction = pick(self.contraction);
        let taper = pick(self.taper);
        let jitter = [
            pick([-self.center_jitter_mm, self.center_jitter_mm]),
            pick([-self.center_jitter_mm, self.center_jitter_mm]),
        ];
        let drift_mm = [
            pick([-self.center_drift_mm, self.center_drift_mm]),
            pick([-self.center_drift_mm, self.center_drift_mm]),
        ];
        // Centre the heart's extent along the RV axis, then jitter.
        let r_epi = lv_radius_mm + myo_thickness_mm;
        let reach = r_epi + rv_overlap * rv_radius_mm + rv_radius_mm;
        let shift = 0.5 * (reach - r_epi);
        let [sx, sy, _] = self.spacing.0;
        let mid = [
            0.5 * (self.dims.nx as f64 - 1.0) * sx,
            0.5 * (self.dims.ny as f64 - 1.0) * sy,
        ];
        let center_mm = [
            mid[0] - shift * rv_angle_rad.cos() + jitter[0],
            mid[1] - shift * rv_angle_rad.sin() + jitter[1],
        ];
        PhantomParams {
            lv_radius_mm,
            myo_thickness_mm,
            rv_radius_mm,
            rv_overlap,
            rv_angle_rad,
            contraction,
            taper,
            center_mm,
            drift_mm,
        }
    }
}

/// One concrete phantom geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomParams {
    pub lv_radius_mm: f64,
    pub myo_thickness_mm: f64,
    pub rv_radius_mm: f64,
    pub rv_overlap: f64,
    pub rv_angle_rad: f64,
    pub contraction: f64,
    pub taper: f64,
    /// LV centre at the middle slice.
    pub center_mm: [f64; 2],
    /// Centre offset between the first and last slice.
    pub drift_mm: [f64; 2],
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lv_radius_mm", self.lv_radius_mm),
            ("myo_thickness_mm", self.myo_thickness_mm),
            ("rv_radius_mm", self.rv_radius_mm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, format!("{v} must be positive")));
            }
        }
        if !(self.contraction > 0.0 && self.contraction <= 1.0) {
            return Err(Error::invalid("contraction", format!("{} is outside (0, 1]", self.contraction)));
        }
        if !(0.0..1.0).contains(&self.taper) {
            return Err(Error::invalid("taper", format!("{} is outside [0, 1)", self.taper)));
        }
        if !(0.0..1.0).contains(&self.rv_overlap) {
            return Err(Error::invalid("rv_overlap", format!("{} is outside [0, 1)", self.rv_overlap)));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for v in self.values() {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    fn values(&self) -> [f64; 11] {
        [
            self.lv_radius_mm,
            self.myo_thickness_mm,
            self.rv_radius_mm,
            self.rv_overlap,
            self.rv_angle_rad,
            self.contraction,
            self.taper,
            self.center_mm[0],
            self.center_mm[1],
            self.drift_mm[0],
            self.drift_mm[1],
        ]
    }

    fn epi_radius(&self) -> f64 {
        self.lv_radius_mm + self.myo_thickness_mm
    }

    fn heart_reach(&self) -> f64 {
        self.epi_radius() + self.rv_overlap * self.rv_radius_mm + self.rv_radius_mm
    }

    fn radius_scale(&self, z: usize, nz: usize) -> f64 {
        1.0 - self.taper * slice_offset(z, nz).powi(2)
    }
}

/// Slice position in [-1, 1] with the middle of the stack at 0.
fn slice_offset(z: usize, nz: usize) -> f64 {
    if nz <= 1 {
        0.0
    } else {
        2.0 * z as f64 / (nz - 1) as f64 - 1.0
    }
}

#[derive(Clone, Copy, Debug)]
struct Slice {
    center: [f64; 2],
    r_endo: f64,
    r_epi: f64,
    rv_center: [f64; 2],
    r_rv: f64,
}

impl Slice {
    fn new(p: &PhantomParams, z: usize, nz: usize) -> Self {
        let f = p.radius_scale(z, nz);
        let u = 0.5 * slice_offset(z, nz);
        let center = [p.center_mm[0] + u * p.drift_mm[0], p.center_mm[1] + u * p.drift_mm[1]];
        let dist = f * (p.epi_radius() + p.rv_overlap * p.rv_radius_mm);
        Slice {
            center,
            r_endo: f * p.lv_radius_mm,
            r_epi: f * p.epi_radius(),
            rv_center: [
                center[0] + dist * p.rv_angle_rad.cos(),
                center[1] + dist * p.rv_angle_rad.sin(),
            ],
            r_rv: f * p.rv_radius_mm,
        }
    }

    fn classify(&self, q: [f64; 2]) -> Class {
        let rho = (q[0] - self.center[0]).hypot(q[1] - self.center[1]);
        if rho < self.r_endo {
            Class::Lv
        } else if rho < self.r_epi {
            Class::Myo
        } else if (q[0] - self.rv_center[0]).hypot(q[1] - self.rv_center[1]) < self.r_rv {
            Class::Rv
        } else {
            Class::Background
        }
    }
}

/// Radial profile of the in-plane contraction: `s = c` inside `r_inner`,
/// `1` beyond `r_outer`, smootherstep in between. A point at radius `rho`
/// in the end-diastolic frame sits at radius `s(rho) * rho` at end-systole.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadialContraction {
    pub c: f64,
    pub r_inner: f64,
    pub r_outer: f64,
}

impl RadialContraction {
    pub fn scale(&self, rho: f64) -> f64 {
        if rho <= self.r_inner {
            self.c
        } else if rho >= self.r_outer {
            1.0
        } else {
            let x = (rho - self.r_inner) / (self.r_outer - self.r_inner);
            self.c + (1.0 - self.c) * x * x * x * (x * (6.0 * x - 15.0) + 10.0)
        }
    }

    pub fn scale_derivative(&self, rho: f64) -> f64 {
        if rho <= self.r_inner || rho >= self.r_outer {
            0.0
        } else {
            let w = self.r_outer - self.r_inner;
            let x = (rho - self.r_inner) / w;
            (1.0 - self.c) * 30.0 * x * x * (x - 1.0) * (x - 1.0) / w
        }
    }

    /// End-systolic radius of an end-diastolic radius.
    pub fn forward(&self, rho: f64) -> f64 {
        self.scale(rho) * rho
    }

    /// End-diastolic radius of an end-systolic radius.
    pub fn inverse(&self, rho_es: f64) -> f64 {
        if self.c == 1.0 {
            return rho_es;
        }
        if rho_es <= self.c * self.r_inner {
            return rho_es / self.c;
        }
        if rho_es >= self.r_outer {
            return rho_es;
        }
        let (mut lo, mut hi) = (self.r_inner, self.r_outer);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if self.forward(mid) < rho_es {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= f64::EPSILON * hi {
                break;
            }
        }
        0.5 * (lo + hi)
    }

    /// Jacobian determinant of the in-plane map at end-diastolic radius `rho`.
    pub fn jacobian(&self, rho: f64) -> f64 {
        let s = self.scale(rho);
        s * (s + rho * self.scale_derivative(rho))
    }
}

/// Closed-form quantities of a phantom case.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticTruth {
    pub ef_lv: f64,
    pub ef_rv: f64,
    pub mt_ed: f64,
    pub mt_es: f64,
    pub lv_volume_ed_ml: f64,
    pub lv_volume_es_ml: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomCase {
    pub id: usize,
    pub seed: u64,
    pub params: PhantomParams,
    pub ed_image: Volume,
    pub ed_labels: LabelMap,
    pub es_image: Volume,
    pub es_labels: LabelMap,
    /// Samples ES at ED voxels: `warp_image(es_image, gt_field) ~ ed_image`.
    pub gt_field: DisplacementField,
    /// Samples ED at ES voxels.
    pub gt_inverse: DisplacementField,
    pub truth: AnalyticTruth,
}

impl PhantomCase {
    /// `(fixed, moving)` for end-systole to end-diastole registration.
    pub fn es_to_ed(&self) -> (&Volume, &Volume) {
        (&self.ed_image, &self.es_image)
    }
}

fn contraction_of(cfg: &PhantomConfig, p: &PhantomParams) -> RadialContraction {
    let r_inner = p.heart_reach() + cfg.support_margin_mm;
    RadialContraction {
        c: p.contraction,
        r_inner,
        r_outer: r_inner + cfg.transition_mm,
    }
}

fn check_fit(cfg: &PhantomConfig, p: &PhantomParams) -> Result<()> {
    let [sx, sy, _] = cfg.spacing.0;
    let (max_x, max_y) = ((cfg.dims.nx as f64 - 2.0) * sx, (cfg.dims.ny as f64 - 2.0) * sy);
    for z in 0..cfg.dims.nz {
        let s = Slice::new(p, z, cfg.dims.nz);
        let disks = [
            ("lv_radius_mm + myo_thickness_mm", s.center, s.r_epi),
            ("rv_radius_mm", s.rv_center, s.r_rv),
        ];
        for (keys, c, r) in disks {
            if c[0] - r < sx || c[1] - r < sy || c[0] + r > max_x || c[1] + r > max_y {
                return Err(Error::Geometry(format!(
                    "slice {z}: disk at ({:.1}, {:.1}) mm with radius {r:.1} mm leaves the {} grid; reduce {keys}",
                    c[0], c[1], cfg.dims
                )));
            }
        }
    }
    Ok(())
}

fn to_f32(v: f64) -> f64 {
    f64::from(v as f32)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let w: Vec<f64> = (-r..=r).map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Separable in-plane Gaussian blur with clamped borders.
fn blur_in_plane(v: &mut Volume, sigma: f64) {
    if sigma == 0.0 {
        return;
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let d = v.dims;
    let mut tmp = vec![0.0; d.len()];
    for (axis, len) in [(0usize, d.nx), (1, d.ny)] {
        for z in 0..d.nz {
            for y in 0..d.ny {
                for x in 0..d.nx {
                    let pos = if axis == 0 { x } else { y } as i64;
                    let mut acc = 0.0;
                    for (j, w) in k.iter().enumerate() {
                        let q = (pos + j as i64 - r).clamp(0, len as i64 - 1) as usize;
                        let src = if axis == 0 { d.index(q, y, z) } else { d.index(x, q, z) };
                        acc += w * v.data[src];
                    }
                    tmp[d.index(x, y, z)] = acc;
                }
            }
        }
        std::mem::swap(&mut v.data, &mut tmp);
    }
}

fn add_noise<R: Rng + ?Sized>(v: &mut Volume, std: f64, rng: &mut R) {
    if std == 0.0 {
        return;
    }
    for x in &mut v.data {
        let n: f64 = rng.sample(StandardNormal);
        *x += std * n;
    }
}

/// Renders a phantom from explicit geometry. `rng` supplies only the
/// acquisition noise, drawn for ED then ES.
pub fn render_case<R: Rng + ?Sized>(
    cfg: &PhantomConfig,
    params: &PhantomParams,
    id: usize,
    seed: u64,
    rng: &mut R,
) -> Result<PhantomCase> {
    cfg.validate()?;
    params.validate()?;
    check_fit(cfg, params)?;
    // Everything is kept f32-representable so cases survive FVOL storage
    // bit for bit.
    let (d, sp) = (cfg.dims, Spacing(cfg.spacing.0.map(to_f32)));
    let [sx, sy, sz] = sp.0;
    let radial = contraction_of(cfg, params);
    let slices: Vec<Slice> = (0..d.nz).map(|z| Slice::new(params, z, d.nz)).collect();

    let n = d.len();
    let mut ed_cls = vec![0u8; n];
    let mut es_cls = vec![0u8; n];
    let mut gt = vec![0.0; 3 * n];
    let mut inv = vec![0.0; 3 * n];
    for z in 0..d.nz {
        let s = &slices[z];
        for y in 0..d.ny {
            for x in 0..d.nx {
                let i = d.index(x, y, z);
                let q = [x as f64 * sx, y as f64 * sy];
                let rel = [q[0] - s.center[0], q[1] - s.center[1]];
                let rho = rel[0].hypot(rel[1]);
                ed_cls[i] = s.classify(q).code();

                let k = radial.scale(rho) - 1.0;
                gt[i] = k * rel[0] / sx;
                gt[n + i] = k * rel[1] / sy;

                let ratio = if rho == 0.0 { 1.0 / radial.c } else { radial.inverse(rho) / rho };
                let src = [s.center[0] + ratio * rel[0], s.center[1] + ratio * rel[1]];
                es_cls[i] = s.classify(src).code();
                inv[i] = (ratio - 1.0) * rel[0] / sx;
                inv[n + i] = (ratio - 1.0) * rel[1] / sy;
            }
        }
    }

    let render = |cls: &[u8]| -> Result<Volume> {
        let data = cls
            .iter()
            .map(|&c| cfg.levels.of(Class::from_code(c).unwrap_or(Class::Background)))
            .collect();
        Volume::new(d, sp, data)
    };
    let mut ed_image = render(&ed_cls)?;
    let mut es_image = render(&es_cls)?;
    blur_in_plane(&mut ed_image, cfg.blur_sigma_vox);
    blur_in_plane(&mut es_image, cfg.blur_sigma_vox);
    add_noise(&mut ed_image, cfg.noise_std, rng);
    add_noise(&mut es_image, cfg.noise_std, rng);
    for v in [&mut ed_image.data, &mut es_image.data, &mut gt, &mut inv] {
        v.iter_mut().for_each(|x| *x = to_f32(*x));
    }

    let c = params.contraction;
    let mt_ed = slices.iter().map(|s| s.r_epi - s.r_endo).sum::<f64>() / d.nz as f64;
    let lv_volume_ed_ml = slices.iter().map(|s| std::f64::consts::PI * s.r_endo * s.r_endo * sz).sum::<f64>() / 1000.0;
    let ef = 100.0 * (1.0 - c * c);
    Ok(PhantomCase {
        id,
        seed,
        params: params.clone(),
        ed_image,
        ed_labels: LabelMap::new(d, sp, ed_cls)?,
        es_image,
        es_labels: LabelMap::new(d, sp, es_cls)?,
        gt_field: DisplacementField::new(d, sp, gt)?,
        gt_inverse: DisplacementField::new(d, sp, inv)?,
        truth: AnalyticTruth {
            ef_lv: ef,
            ef_rv: ef,
            mt_ed,
            mt_es: c * mt_ed,
            lv_volume_ed_ml,
            lv_volume_es_ml: c * c * lv_volume_ed_ml,
        },
    })
}

/// Draws geometry and noise from `rng`.
pub fn generate_case<R: Rng + ?Sized>(cfg: &PhantomConfig, rng: &mut R) -> Result<PhantomCase> {
    let seed: u64 = rng.gen();
    generate_seeded(cfg, 0, seed)
}

/// Case `id` fully determined by `seed`.
pub fn generate_seeded(cfg: &PhantomConfig, id: usize, seed: u64) -> Result<PhantomCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = cfg.draw_params(&mut rng);
    render_case(cfg, &params, id, seed, &mut rng)
}

/// `n_cases` cases with per-case seeds drawn from `rng`.
pub fn generate_dataset<R: Rng + ?Sized>(cfg: &PhantomConfig, n_cases: usize, rng: &mut R) -> Result<Vec<PhantomCase>> {
    let seeds: Vec<u64> = (0..n_cases).map(|_| rng.gen()).collect();
    seeds.into_iter().enumerate().map(|(id, seed)| generate_seeded(cfg, id, seed)).collect()
}

/// Contiguous train/validation/test index ranges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl DatasetSplit {
    /// 8:1:1, but with at least one validation and one test case once
    /// there are three or more cases.
    pub fn for_len(n: usize) -> Self {
        let n_val = (n / 10).max(usize::from(n >= 3));
        let n_train = n - 2 * n_val;
        Self::with_sizes(n_train, n_val, n_val)
    }

    pub fn with_sizes(train: usize, val: usize, test: usize) -> Self {
        Self {
            train: 0..train,
            val: train..train + val,
            test: train + val..train + val + test,
        }
    }

    pub fn len(&self) -> usize {
        self.test.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

const CASE_FILES: [&str; 6] = [
    "ed_image.fvol",
    "ed_labels.fvol",
    "es_image.fvol",
    "es_labels.fvol",
    "gt_field.fvol",
    "gt_inverse.fvol",
];

pub fn case_dir_name(id: usize) -> String {
    format!("case_{id:04}")
}

fn manifest_text(case: &PhantomCase) -> String {
    let p = &case.params;
    let t = &case.truth;
    let mut s = String::new();
    let rows: [(&str, String); 17] = [
        ("case_id", case.id.to_string()),
        ("seed", case.seed.to_string()),
        ("lv_radius_mm", p.lv_radius_mm.to_string()),
        ("myo_thickness_mm", p.myo_thickness_mm.to_string()),
        ("rv_radius_mm", p.rv_radius_mm.to_string()),
        ("rv_overlap", p.rv_overlap.to_string()),
        ("rv_angle_rad", p.rv_angle_rad.to_string()),
        ("contraction", p.contraction.to_string()),
        ("taper", p.taper.to_string()),
        ("center_mm", format!("{},{}", p.center_mm[0], p.center_mm[1])),
        ("drift_mm", format!("{},{}", p.drift_mm[0], p.drift_mm[1])),
        ("ef_lv", t.ef_lv.to_string()),
        ("ef_rv", t.ef_rv.to_string()),
        ("mt_ed", t.mt_ed.to_string()),
        ("mt_es", t.mt_es.to_string()),
        ("lv_volume_ed_ml", t.lv_volume_ed_ml.to_string()),
        ("lv_volume_es_ml", t.lv_volume_es_ml.to_string()),
    ];
    for (k, v) in rows {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str, format: &'static str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
            format,
            reason: format!("line {}: expected key = value", n + 1),
        })?;
        if out.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Format {
                format,
                reason: format!("line {}: duplicate key `{}`", n + 1, k.trim()),
            });
        }
    }
    Ok(out)
}

struct Manifest(BTreeMap<String, String>);

impl Manifest {
    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.0.get(key).ok_or_else(|| Error::Format {
            format: "case manifest",
            reason: format!("missing `{key}`"),
        })?;
        raw.parse().map_err(|_| Error::Format {
            format: "case manifest",
            reason: format!("`{key}` has unparsable value `{raw}`"),
        })
    }

    fn pair(&self, key: &str) -> Result<[f64; 2]> {
        let raw: String = self.get(key)?;
        let parts: Vec<f64> = raw.split(',').map(|p| p.trim().parse()).collect::<std::result::Result<_, _>>().map_err(
            |_| Error::Format {
                format: "case manifest",
                reason: format!("`{key}` is not a number pair"),
            },
        )?;
        <[f64; 2]>::try_from(parts).map_err(|_| Error::Format {
            format: "case manifest",
            reason: format!("`{key}` needs exactly two numbers"),
        })
    }
}

/// Writes the case into `dir` (created if missing).
pub fn write_case(dir: &Path, case: &PhantomCase) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    fvol::write_volume(&dir.join(CASE_FILES[0]), &case.ed_image)?;
    fvol::write_labels(&dir.join(CASE_FILES[1]), &case.ed_labels)?;
    fvol::write_volume(&dir.join(CASE_FILES[2]), &case.es_image)?;
    fvol::write_labels(&dir.join(CASE_FILES[3]), &case.es_labels)?;
    fvol::write_field(&dir.join(CASE_FILES[4]), &case.gt_field)?;
    fvol::write_field(&dir.join(CASE_FILES[5]), &case.gt_inverse)?;
    fvol::write_atomic(&dir.join("manifest.txt"), manifest_text(case).as_bytes())
}

pub fn read_case(dir: &Path) -> Result<PhantomCase> {
    let path = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m = Manifest(parse_key_values(&text, "case manifest")?);
    let params = PhantomParams {
        lv_radius_mm: m.get("lv_radius_mm")?,
        myo_thickness_mm: m.get("myo_thickness_mm")?,
        rv_radius_mm: m.get("rv_radius_mm")?,
        rv_overlap: m.get("rv_overlap")?,
        rv_angle_rad: m.get("rv_angle_rad")?,
        contraction: m.get("contraction")?,
        taper: m.get("taper")?,
        center_mm: m.pair("center_mm")?,
        drift_mm: m.pair("drift_mm")?,
    };
    Ok(PhantomCase {
        id: m.get("case_id")?,
        seed: m.get("seed")?,
        params,
        ed_image: fvol::read_volume(&dir.join(CASE_FILES[0]))?,
        ed_labels: fvol::read_labels(&dir.join(CASE_FILES[1]))?,
        es_image: fvol::read_volume(&dir.join(CASE_FILES[2]))?,
        es_labels: fvol::read_labels(&dir.join(CASE_FILES[3]))?,
        gt_field: fvol::read_field(&dir.join(CASE_FILES[4]))?,
        gt_inverse: fvol::read_field(&dir.join(CASE_FILES[5]))?,
        truth: AnalyticTruth {
            ef_lv: m.get("ef_lv")?,
            ef_rv: m.get("ef_rv")?,
            mt_ed: m.get("mt_ed")?,
            mt_es: m.get("mt_es")?,
            lv_volume_ed_ml: m.get("lv_volume_ed_ml")?,
            lv_volume_es_ml: m.get("lv_volume_es_ml")?,
        },
    })
}

/// Writes every case under `root/case_NNNN` plus `root/dataset.txt`
/// recording the split and any extra `key = value` lines in `echo`.
pub fn write_dataset(root: &Path, cases: &[PhantomCase], split: &DatasetSplit, echo: &[(String, String)]) -> Result<()> {
    if split.len() != cases.len() {
        return Err(Error::invalid(
            "split",
            format!("covers {} cases but {} were given", split.len(), cases.len()),
        ));
    }
    for case in cases {
        write_case(&root.join(case_dir_name(case.id)), case)?;
    }
    let mut s = String::new();
    let r = |r: &Range<usize>| format!("{}..{}", r.start, r.end);
    let _ = writeln!(s, "n_cases = {}", cases.len());
    let _ = writeln!(s, "train = {}", r(&split.train));
    let _ = writeln!(s, "val = {}", r(&split.val));
    let _ = writeln!(s, "test = {}", r(&split.test));
    for (k, v) in echo {
        let _ = writeln!(s, "{k} = {v}");
    }
    fvol::write_atomic(&root.join("dataset.txt"), s.as_bytes())
}

fn parse_range(raw: &str) -> Result<Range<usize>> {
    let bad = || Error::Format {
        format: "dataset manifest",
        reason: format!("`{raw}` is not a start..end range"),
    };
    let (a, b) = raw.split_once("..").ok_or_else(bad)?;
    let (a, b) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
    if a > b {
        return Err(bad());
    }
    Ok(a..b)
}

pub fn read_split(root: &Path) -> Result<DatasetSplit> {
    let path = root.join("dataset.txt");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let kv = parse_key_values(&text, "dataset manifest")?;
    let get = |k: &str| {
        kv.get(k).ok_or_else(|| Error::Format {
            format: "dataset manifest",
            reason: format!("missing `{k}`"),
        })
    };
    let split = DatasetSplit {
        train: parse_range(get("train")?)?,
        val: parse_range(get("val")?)?,
        test: parse_range(get("test")?)?,
    };
    let contiguous = split.train.start == 0 && split.train.end == split.val.start && split.val.end == split.test.start;
    if !contiguous {
        return Err(Error::Format {
            format: "dataset manifest",
            reason: "split ranges must be contiguous from 0".into(),
        });
    }
    Ok(split)
}

/// Reads the cases with ids in `range`.
pub fn read_cases(root: &Path, range: Range<usize>) -> Result<Vec<PhantomCase>> {
    range.map(|id| read_case(&root.join(case_dir_name(id)))).collect()
}
