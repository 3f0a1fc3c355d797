//! Flat `section.key = value` views of the configuration structs, used for
//! config files and for echoing the effective configuration.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::flow::SamplerConfig;
use crate::losses::{LossConfig, NccKind};
use crate::network::NetworkConfig;
use crate::synth::PhantomConfig;
use crate::train::TrainConfig;
use crate::volume::{Dims, Spacing};

pub trait Settings {
    fn section(&self) -> &'static str;
    fn entries(&self) -> Vec<(&'static str, String)>;
    fn set(&mut self, key: &str, value: &str) -> Result<()>;
}

/// `section.key` / value pairs in declaration order.
pub fn echo(s: &dyn Settings) -> Vec<(String, String)> {
    s.entries()
        .into_iter()
        .map(|(k, v)| (format!("{}.{k}", s.section()), v))
        .collect()
}

fn bad(key: &str, value: &str, expected: &str) -> Error {
    Error::InvalidArgument {
        name: "config",
        reason: format!("`{key}` = `{value}`: expected {expected}"),
    }
}

fn unknown(section: &str, key: &str) -> Error {
    Error::InvalidArgument {
        name: "config",
        reason: format!("unknown key `{section}.{key}`"),
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| bad(key, value, "a number"))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, value, "true or false")),
    }
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| bad(key, value, "a comma-separated list")))
        .collect()
}

fn array<const N: usize>(key: &str, value: &str) -> Result<[f64; N]> {
    let v: Vec<f64> = list(key, value)?;
    <[f64; N]>::try_from(v).map_err(|_| bad(key, value, &format!("{N} comma-separated numbers")))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn dims(key: &str, value: &str) -> Result<Dims> {
    let parts: Vec<usize> = value
        .split('x')
        .map(|p| p.trim().parse().map_err(|_| bad(key, value, "NXxNYxNZ")))
        .collect::<Result<_>>()?;
    match parts[..] {
        [nx, ny, nz] => Ok(Dims::new(nx, ny, nz)),
        _ => Err(bad(key, value, "NXxNYxNZ")),
    }
}

impl Settings for NetworkConfig {
    fn section(&self) -> &'static str {
        "network"
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n_scales", self.n_scales.to_string()),
            ("channels", join(&self.channels)),
            ("corr_radius", self.corr_radius.to_string()),
            ("time_embed_dim", self.time_embed_dim.to_string()),
            ("mlp_hidden", self.mlp_hidden.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "n_scales" => self.n_scales = num(key, value)?,
            "channels" => self.channels = list(key, value)?,
            "corr_radius" => self.corr_radius = num(key, value)?,
            "time_embed_dim" => self.time_embed_dim = num(key, value)?,
            "mlp_hidden" => self.mlp_hidden = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Err(unknown(self.section(), key)),
        }
        Ok(())
    }
}

impl Settings for LossConfig {
    fn section(&self) -> &'static str {
        "loss"
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let kind = match self.ncc_kind {
            NccKind::Squared => "squared",
            NccKind::Signed => "signed",
        };
        vec![
            ("ncc_window", self.ncc_window.to_string()),
            ("eps", self.eps.to_string()),
            ("grad_weight", self.grad_weight.to_string()),
            ("ncc_kind", kind.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "ncc_window" => self.ncc_window = num(key, value)?,
            "eps" => self.eps = num(key, value)?,
            "grad_weight" => self.grad_weight = num(key, value)?,
            "ncc_kind" => {
                self.ncc_kind = match value.trim() {
                    "squared" => NccKind::Squared,
                    "signed" => NccKind::Signed,
                    _ => return Err(bad(key, value, "squared or signed")),
                }
            }
            _ => return Err(unknown(self.section(), key)),
        }
        Ok(())
    }
}

impl Settings for TrainConfig {
    fn section(&self) -> &'static str {
        "train"
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("epochs", self.epochs.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("lr", self.lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("ema_mu", self.ema_mu.to_string()),
            ("patience", self.patience.to_string()),
            ("augment", self.augment.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = num(key, value)?,
            "warmup_epochs" => self.warmup_epochs = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "ema_mu" => self.ema_mu = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "augment" => self.augment = flag(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Err(unknown(self.section(), key)),
        }
        Ok(())
    }
}

impl Settings for SamplerConfig {
    fn section(&self) -> &'static str {
        "sampler"
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("steps", self.steps.to_string()),
            ("eta", self.eta.to_string()),
            ("lambda_g", self.lambda_g.to_string()),
            ("use_sde", self.use_sde.to_string()),
            ("use_heun", self.use_heun.to_string()),
            ("use_ig", self.use_ig.to_string()),
            ("use_guidance", self.use_guidance.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "steps" => self.steps = num(key, value)?,
            "eta" => self.eta = num(key, value)?,
            "lambda_g" => self.lambda_g = num(key, value)?,
            "use_sde" => self.use_sde = flag(key, value)?,
            "use_heun" => self.use_heun = flag(key, value)?,
            "use_ig" => self.use_ig = flag(key, value)?,
            "use_guidance" => self.use_guidance = flag(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Err(unknown(self.section(), key)),
        }
        Ok(())
    }
}

impl Settings for PhantomConfig {
    fn section(&self) -> &'static str {
        "phantom"
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let d = self.dims;
        vec![
            ("dims", format!("{}x{}x{}", d.nx, d.ny, d.nz)),
            ("spacing", join(&self.spacing.0)),
            ("lv_radius_mm", join(&self.lv_radius_mm)),
            ("myo_thickness_mm", join(&self.myo_thickness_mm)),
            ("rv_radius_mm", join(&self.rv_radius_mm)),
            ("rv_overlap", join(&self.rv_overlap)),
            ("rv_angle_deg", join(&self.rv_angle_deg)),
            ("contraction", join(&self.contraction)),
            ("taper", join(&self.taper)),
            ("center_jitter_mm", self.center_jitter_mm.to_string()),
            ("center_drift_mm", self.center_drift_mm.to_string()),
            ("background_level", self.levels.background.to_string()),
            ("myocardium_level", self.levels.myocardium.to_string()),
            ("blood_level", self.levels.blood.to_string()),
            ("blur_sigma_vox", self.blur_sigma_vox.to_string()),
            ("noise_std", self.noise_std.to_string()),
            ("support_margin_mm", self.support_margin_mm.to_string()),
            ("transition_mm", self.transition_mm.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dims" => self.dims = dims(key, value)?,
            "spacing" => self.spacing = Spacing(array(key, value)?),
            "lv_radius_mm" => self.lv_radius_mm = array(key, value)?,
            "myo_thickness_mm" => self.myo_thickness_mm = array(key, value)?,
            "rv_radius_mm" => self.rv_radius_mm = array(key, value)?,
            "rv_overlap" => self.rv_overlap = array(key, value)?,
            "rv_angle_deg" => self.rv_angle_deg = array(key, value)?,
            "contraction" => self.contraction = array(key, value)?,
            "taper" => self.taper = array(key, value)?,
            "center_jitter_mm" => self.center_jitter_mm = num(key, value)?,
            "center_drift_mm" => self.center_drift_mm = num(key, value)?,
            "background_level" => self.levels.background = num(key, value)?,
            "myocardium_level" => self.levels.myocardium = num(key, value)?,
            "blood_level" => self.levels.blood = num(key, value)?,
            "blur_sigma_vox" => self.blur_sigma_vox = num(key, value)?,
            "noise_std" => self.noise_std = num(key, value)?,
            "support_margin_mm" => self.support_margin_mm = num(key, value)?,
            "transition_mm" => self.transition_mm = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Err(unknown(self.section(), key)),
        }
        Ok(())
    }
}
