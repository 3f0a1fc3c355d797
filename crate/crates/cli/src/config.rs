//! Run configuration: defaults, then a `key = value` file, then flag
//! overrides, all routed by their `section.` prefix.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ddfflow::config::{echo, Settings};
use ddfflow::flow::{saturating_eta, SamplerConfig};
use ddfflow::network::NetworkConfig;
use ddfflow::synth::{parse_key_values, PhantomConfig};
use ddfflow::train::TrainConfig;
use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Streams of the root seed handed to each randomised component.
#[derive(Clone, Copy, Debug)]
pub enum Component {
    Data = 1,
    Init = 2,
    Train = 3,
    Sampler = 4,
}

pub fn derive_seed(root: u64, component: Component) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(component as u64);
    rng.next_u64()
}

/// Keys that are not owned by any library config.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSection {
    pub seed: u64,
    pub n_cases: usize,
    pub instance_opt_steps: usize,
    pub instance_opt_lr: f64,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            n_cases: 200,
            instance_opt_steps: 0,
            instance_opt_lr: 0.01,
            data: None,
            checkpoint: None,
            predictions: None,
        }
    }
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> ddfflow::Result<T> {
    value.trim().parse().map_err(|_| ddfflow::Error::InvalidArgument {
        name: "config",
        reason: format!("`run.{key}` = `{value}` is not valid"),
    })
}

impl Settings for RunSection {
    fn section(&self) -> &'static str {
        "run"
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seed", self.seed.to_string()),
            ("n_cases", self.n_cases.to_string()),
            ("instance_opt_steps", self.instance_opt_steps.to_string()),
            ("instance_opt_lr", self.instance_opt_lr.to_string()),
            ("data", path_text(&self.data)),
            ("checkpoint", path_text(&self.checkpoint)),
            ("predictions", path_text(&self.predictions)),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> ddfflow::Result<()> {
        let path = |v: &str| (!v.trim().is_empty()).then(|| PathBuf::from(v.trim()));
        match key {
            "seed" => self.seed = parse(key, value)?,
            "n_cases" => self.n_cases = parse(key, value)?,
            "instance_opt_steps" => self.instance_opt_steps = parse(key, value)?,
            "instance_opt_lr" => self.instance_opt_lr = parse(key, value)?,
            "data" => self.data = path(value),
            "checkpoint" => self.checkpoint = path(value),
            "predictions" => self.predictions = path(value),
            _ => {
                return Err(ddfflow::Error::InvalidArgument {
                    name: "config",
                    reason: format!("unknown key `run.{key}`"),
                })
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    pub run: RunSection,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub phantom: PhantomConfig,
    /// Whether `sampler.eta` was given rather than derived from the step count.
    pub eta_explicit: bool,
}

impl RunConfig {
    /// Builds the effective configuration. `overrides` are applied after the
    /// file, in order; `seed` replaces `run.seed` from any source.
    pub fn load(file: Option<&Path>, seed: Option<u64>, overrides: &[(String, String)]) -> Result<Self> {
        let mut entries: Vec<(String, String)> = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let kv = parse_key_values(&text, "config file").with_context(|| format!("parsing {}", path.display()))?;
            entries.extend(kv);
        }
        entries.extend(overrides.iter().cloned());

        let mut cfg = RunConfig::default();
        for (k, v) in entries.iter().filter(|(k, _)| k == "run.seed") {
            cfg.set(k, v)?;
        }
        if let Some(s) = seed {
            cfg.run.seed = s;
        }
        let root = cfg.run.seed;
        cfg.phantom.seed = derive_seed(root, Component::Data);
        cfg.network.seed = derive_seed(root, Component::Init);
        cfg.train.seed = derive_seed(root, Component::Train);
        cfg.sampler.seed = derive_seed(root, Component::Sampler);

        for (k, v) in entries.iter().filter(|(k, _)| k != "run.seed") {
            cfg.set(k, v)?;
        }
        cfg.eta_explicit = entries.iter().any(|(k, _)| k == "sampler.eta");
        if !cfg.eta_explicit {
            cfg.sampler.eta = saturating_eta(cfg.sampler.steps);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let Some((section, field)) = key.split_once('.') else {
            bail!("config key `{key}` has no section prefix");
        };
        let target: &mut dyn Settings = match section {
            "run" => &mut self.run,
            "network" => &mut self.network,
            "loss" => &mut self.train.loss,
            "train" => &mut self.train,
            "sampler" => &mut self.sampler,
            "phantom" => &mut self.phantom,
            _ => bail!("unknown config section `{section}` in `{key}`"),
        };
        target.set(field, value)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate().context("invalid [network] configuration")?;
        self.train.validate().context("invalid [train] configuration")?;
        self.sampler.validate().context("invalid [sampler] configuration")?;
        self.phantom.validate().context("invalid [phantom] configuration")?;
        if !(self.run.instance_opt_lr >= 0.0 && self.run.instance_opt_lr.is_finite()) {
            bail!("invalid [run] configuration: instance_opt_lr must be finite and non-negative");
        }
        Ok(())
    }

    /// Sampler settings for a different step count, keeping an explicit eta.
    pub fn sampler_with_steps(&self, steps: usize) -> SamplerConfig {
        let eta = if self.eta_explicit {
            self.sampler.eta
        } else {
            saturating_eta(steps)
        };
        SamplerConfig {
            steps,
            eta,
            ..self.sampler.clone()
        }
    }

    pub fn echo(&self) -> Vec<(String, String)> {
        let sections: [&dyn Settings; 6] = [
            &self.run,
            &self.network,
            &self.train.loss,
            &self.train,
            &self.sampler,
            &self.phantom,
        ];
        sections.into_iter().flat_map(echo).collect()
    }

    pub fn echo_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.echo() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn seeds_split_per_component() {
        let a = RunConfig::load(None, Some(7), &[]).unwrap();
        let b = RunConfig::load(None, Some(7), &[]).unwrap();
        assert_eq!(a.echo(), b.echo());
        let seeds = [a.phantom.seed, a.network.seed, a.train.seed, a.sampler.seed];
        let mut unique = seeds.to_vec();
        unique.sort_unstable();
        unique.dedup();
        assert_eq!(unique.len(), 4);
        let c = RunConfig::load(None, Some(8), &[]).unwrap();
        assert_ne!(c.phantom.seed, a.phantom.seed);
    }

    #[test]
    fn explicit_component_seed_wins() {
        let cfg = RunConfig::load(None, Some(7), &kv(&[("sampler.seed", "5")])).unwrap();
        assert_eq!(cfg.sampler.seed, 5);
        assert_eq!(cfg.train.seed, derive_seed(7, Component::Train));
    }

    #[test]
    fn eta_follows_steps_unless_given() {
        let cfg = RunConfig::load(None, None, &kv(&[("sampler.steps", "4")])).unwrap();
        assert_eq!(cfg.sampler.eta, saturating_eta(4));
        assert_eq!(cfg.sampler_with_steps(20).eta, saturating_eta(20));
        let cfg = RunConfig::load(None, None, &kv(&[("sampler.steps", "4"), ("sampler.eta", "0")])).unwrap();
        assert_eq!(cfg.sampler.eta, 0.0);
        assert_eq!(cfg.sampler_with_steps(20).eta, 0.0);
    }

    #[test]
    fn unknown_keys_and_sections_fail() {
        assert!(RunConfig::load(None, None, &kv(&[("train.speed", "1")])).is_err());
        assert!(RunConfig::load(None, None, &kv(&[("optimizer.lr", "1")])).is_err());
        assert!(RunConfig::load(None, None, &kv(&[("lr", "1")])).is_err());
        let err = RunConfig::load(None, None, &kv(&[("phantom.contraction", "0.5,1.5")])).unwrap_err();
        assert!(format!("{err:#}").contains("contraction"));
    }

    #[test]
    fn file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# desk run\ntrain.lr = 0.001\nrun.seed = 3\nloss.ncc_window = 7\n").unwrap();
        let cfg = RunConfig::load(Some(&path), None, &kv(&[("train.lr", "0.002")])).unwrap();
        assert_eq!(cfg.train.lr, 0.002);
        assert_eq!(cfg.train.loss.ncc_window, 7);
        assert_eq!(cfg.run.seed, 3);
        let cfg = RunConfig::load(Some(&path), Some(4), &[]).unwrap();
        assert_eq!(cfg.run.seed, 4);
        let text = cfg.echo_text();
        assert!(text.contains("run.seed = 4\n"));
        assert!(text.contains("loss.ncc_window = 7\n"));
    }
}
