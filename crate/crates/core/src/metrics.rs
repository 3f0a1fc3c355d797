//! Evaluation metrics: overlap, deformation regularity, ejection fraction
//! and myocardial thickness.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{jacobian_map, warp_labels, Class, DisplacementField, LabelMap};

/// Dice overlap of one class. Two empty masks score 1.
pub fn dice(a: &LabelMap, b: &LabelMap, class: Class) -> f64 {
    let code = class.code();
    dice_by(a, b, |c| c == code)
}

/// Dice of the merged foreground classes.
pub fn dice_foreground(a: &LabelMap, b: &LabelMap) -> f64 {
    let bg = Class::Background.code();
    dice_by(a, b, |c| c != bg)
}

fn dice_by(a: &LabelMap, b: &LabelMap, member: impl Fn(u8) -> bool) -> f64 {
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (ia, ib) = (member(x), member(y));
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JacobianStats {
    /// Percentage of voxels with a non-positive determinant.
    pub pct_nonpositive: f64,
    /// Population standard deviation of the determinant map.
    pub std: f64,
}

pub fn jacobian_stats(ddf: &DisplacementField) -> JacobianStats {
    let j = jacobian_map(ddf);
    let n = j.data.len() as f64;
    let folds = j.data.iter().filter(|&&v| v <= 0.0).count() as f64;
    let mean = j.data.iter().sum::<f64>() / n;
    let var = j.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    JacobianStats {
        pct_nonpositive: 100.0 * folds / n,
        std: var.sqrt(),
    }
}

/// Cavity volume in millilitres.
pub fn cavity_volume(labels: &LabelMap, class: Class) -> f64 {
    labels.count(class) as f64 * labels.spacing.voxel_volume() / 1000.0
}

/// `100 (V_ED - V_ES) / V_ED` for one cavity, in percent.
pub fn ejection_fraction(ed: &LabelMap, es: &LabelMap, class: Class) -> Result<f64> {
    let v_ed = cavity_volume(ed, class);
    if v_ed <= 0.0 {
        return Err(Error::UndefinedEjectionFraction);
    }
    Ok(100.0 * (v_ed - cavity_volume(es, class)) / v_ed)
}

/// Which cardiac phase plays the moving role in a registration task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Moving ES, fixed ED.
    EsToEd,
    /// Moving ED, fixed ES.
    EdToEs,
}

/// Absolute EF error when the warped moving segmentation stands in for the
/// fixed-frame segmentation.
pub fn ef_mae_pair(
    true_moving: &LabelMap,
    warped_moving: &LabelMap,
    true_fixed: &LabelMap,
    class: Class,
    direction: Direction,
) -> Result<f64> {
    let (truth, estimate) = match direction {
        Direction::EsToEd => (
            ejection_fraction(true_fixed, true_moving, class)?,
            ejection_fraction(warped_moving, true_moving, class)?,
        ),
        Direction::EdToEs => (
            ejection_fraction(true_moving, true_fixed, class)?,
            ejection_fraction(true_moving, warped_moving, class)?,
        ),
    };
    Ok((truth - estimate).abs())
}

pub const MT_RAYS: usize = 64;

/// Mean myocardial thickness in mm by ray casting from the LV centroid of
/// every axial slice.
pub fn myocardial_thickness(labels: &LabelMap) -> Result<f64> {
    myocardial_thickness_with_rays(labels, MT_RAYS)
}

/// Unit directions at `2 pi k / n`. When `n` is a multiple of four the set is
/// closed under exact quarter turns.
fn ray_directions(n: usize) -> Vec<[f64; 2]> {
    if n % 4 != 0 {
        return (0..n)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / n as f64;
                [a.cos(), a.sin()]
            })
            .collect();
    }
    let quarter: Vec<[f64; 2]> = (0..n / 4)
        .map(|k| {
            let a = std::f64::consts::TAU * k as f64 / n as f64;
            [a.cos(), a.sin()]
        })
        .collect();
    let mut dirs = quarter.clone();
    for q in 1..4 {
        for &[c, s] in &quarter {
            dirs.push(match q {
                1 => [-s, c],
                2 => [-c, -s],
                _ => [s, -c],
            });
        }
    }
    dirs
}

const RAY_STEP: f64 = 0.02;

pub fn myocardial_thickness_with_rays(labels: &LabelMap, n_rays: usize) -> Result<f64> {
    let d = labels.dims;
    let [sx, sy, _] = labels.spacing.0;
    let (lv, myo) = (Class::Lv.code(), Class::Myo.code());
    let dirs = ray_directions(n_rays);
    let r_max = ((d.nx * d.nx + d.ny * d.ny) as f64).sqrt();
    let mut total = 0.0;
    let mut rays = 0usize;
    for z in 0..d.nz {
        let (mut cx, mut cy, mut n_lv, mut n_myo) = (0.0, 0.0, 0usize, 0usize);
        for y in 0..d.ny {
            for x in 0..d.nx {
                let c = labels.at(x, y, z);
                if c == lv {
                    cx += x as f64;
                    cy += y as f64;
                    n_lv += 1;
                } else if c == myo {
                    n_myo += 1;
                }
            }
        }
        if n_lv == 0 || n_myo == 0 {
            continue;
        }
        let (cx, cy) = (cx / n_lv as f64, cy / n_lv as f64);
        for &[dx, dy] in &dirs {
            let unit_mm = ((dx * sx).powi(2) + (dy * sy).powi(2)).sqrt();
            let (mut first, mut last) = (None, None);
            let mut k = 0usize;
            loop {
                let r = (k as f64 + 0.5) * RAY_STEP;
                if r > r_max {
                    break;
                }
                let (px, py) = ((cx + r * dx).round(), (cy + r * dy).round());
                if px < 0.0 || py < 0.0 || px >= d.nx as f64 || py >= d.ny as f64 {
                    break;
                }
                if labels.at(px as usize, py as usize, z) == myo {
                    first.get_or_insert(r);
                    last = Some(r);
                }
                k += 1;
            }
            if let (Some(a), Some(b)) = (first, last) {
                total += (b - a + RAY_STEP) * unit_mm;
                rays += 1;
            }
        }
    }
    if rays == 0 {
        return Err(Error::UndefinedThickness);
    }
    Ok(total / rays as f64)
}

/// Per-case evaluation record. Field names are the serialized column names.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dice_rv: f64,
    pub dice_myo: f64,
    pub dice_lv: f64,
    pub dice_mean: f64,
    pub dice_fg: f64,
    pub pct_negjac: f64,
    pub std_jac: f64,
    pub lvef_mae: f64,
    pub rvef_mae: f64,
    pub mt_mae: f64,
    pub seconds: f64,
}

impl EvalReport {
    pub const COLUMNS: [&'static str; 11] = [
        "dice_rv", "dice_myo", "dice_lv", "dice_mean", "dice_fg", "pct_negjac", "std_jac", "lvef_mae", "rvef_mae",
        "mt_mae", "seconds",
    ];

    pub fn values(&self) -> [f64; 11] {
        [
            self.dice_rv,
            self.dice_myo,
            self.dice_lv,
            self.dice_mean,
            self.dice_fg,
            self.pct_negjac,
            self.std_jac,
            self.lvef_mae,
            self.rvef_mae,
            self.mt_mae,
            self.seconds,
        ]
    }

    pub fn from_values(v: [f64; 11]) -> Self {
        Self {
            dice_rv: v[0],
            dice_myo: v[1],
            dice_lv: v[2],
            dice_mean: v[3],
            dice_fg: v[4],
            pct_negjac: v[5],
            std_jac: v[6],
            lvef_mae: v[7],
            rvef_mae: v[8],
            mt_mae: v[9],
            seconds: v[10],
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn csv_header() -> String {
        Self::COLUMNS.join(",")
    }

    pub fn to_csv_row(&self) -> String {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.serialize(self).expect("report serializes");
        let bytes = w.into_inner().expect("in-memory writer");
        String::from_utf8(bytes).expect("utf-8").trim_end().to_string()
    }
}

/// Scores the registration of `moving_labels` onto `fixed_labels` by `ddf`.
pub fn evaluate_case(
    fixed_labels: &LabelMap,
    moving_labels: &LabelMap,
    ddf: &DisplacementField,
    direction: Direction,
    seconds: f64,
) -> Result<EvalReport> {
    let warped = warp_labels(moving_labels, ddf)?;
    let dice_rv = dice(&warped, fixed_labels, Class::Rv);
    let dice_myo = dice(&warped, fixed_labels, Class::Myo);
    let dice_lv = dice(&warped, fixed_labels, Class::Lv);
    let jac = jacobian_stats(ddf);
    Ok(EvalReport {
        dice_rv,
        dice_myo,
        dice_lv,
        dice_mean: (dice_rv + dice_myo + dice_lv) / 3.0,
        dice_fg: dice_foreground(&warped, fixed_labels),
        pct_negjac: jac.pct_nonpositive,
        std_jac: jac.std,
        lvef_mae: ef_mae_pair(moving_labels, &warped, fixed_labels, Class::Lv, direction)?,
        rvef_mae: ef_mae_pair(moving_labels, &warped, fixed_labels, Class::Rv, direction)?,
        mt_mae: (myocardial_thickness(fixed_labels)? - myocardial_thickness(&warped)?).abs(),
        seconds,
    })
}

/// Column-wise mean and sample standard deviation of a set of reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub n: usize,
    pub mean: EvalReport,
    pub sd: EvalReport,
}

pub fn summarize(reports: &[EvalReport]) -> ReportSummary {
    let n = reports.len();
    let mut mean = [0.0; 11];
    let mut sd = [0.0; 11];
    if n > 0 {
        for r in reports {
            for (m, v) in mean.iter_mut().zip(r.values()) {
                *m += v / n as f64;
            }
        }
        if n > 1 {
            for r in reports {
                for ((s, v), m) in sd.iter_mut().zip(r.values()).zip(mean) {
                    *s += (v - m).powi(2) / (n - 1) as f64;
                }
            }
            sd.iter_mut().for_each(|s| *s = s.sqrt());
        }
    }
    ReportSummary {
        n,
        mean: EvalReport::from_values(mean),
        sd: EvalReport::from_values(sd),
    }
}
