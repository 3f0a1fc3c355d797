use std::ops::Range;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ddfflow::fvol::write_atomic;
use ddfflow::network::{checkpoint, NetworkParameters};
use ddfflow::synth::DatasetSplit;
use ddfflow::train::STUDENT_FILE;

use crate::config::RunConfig;
use crate::Common;

pub mod evaluate;
pub mod register;
pub mod synth;
pub mod train;

pub const CONFIG_FILE: &str = "config.txt";

fn split_override(raw: &str) -> Result<(String, String)> {
    match raw.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => bail!("--set expects KEY=VALUE, got `{raw}`"),
    }
}

/// Merges the config file, `--set` overrides and command-specific flag
/// overrides (applied last).
pub fn load_config(common: &Common, flags: Vec<(String, String)>) -> Result<RunConfig> {
    let mut overrides = common
        .overrides
        .iter()
        .map(|s| split_override(s))
        .collect::<Result<Vec<_>>>()?;
    overrides.extend(flags);
    RunConfig::load(common.config.as_deref(), common.seed, &overrides)
}

/// Creates `out` and records the effective configuration in it.
pub fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let text = cfg.echo_text();
    write_atomic(&out.join(CONFIG_FILE), text.as_bytes())?;
    print!("{text}");
    Ok(())
}

pub fn required_path(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    match flag.or_else(|| fallback.clone()) {
        Some(p) => Ok(p),
        None => bail!("missing --{name} (or run.{name} in the config)"),
    }
}

pub fn dataset_split(root: &Path) -> Result<DatasetSplit> {
    if !root.is_dir() {
        bail!("dataset path {} does not exist", root.display());
    }
    ddfflow::synth::read_split(root).with_context(|| format!("reading dataset {}", root.display()))
}

pub fn select_cases(selector: &str, split: &DatasetSplit) -> Result<Range<usize>> {
    let range = match selector {
        "train" => split.train.clone(),
        "val" => split.val.clone(),
        "test" => split.test.clone(),
        "all" => 0..split.len(),
        _ => {
            let parsed = selector
                .split_once("..")
                .and_then(|(a, b)| Some(a.trim().parse().ok()?..b.trim().parse().ok()?));
            match parsed {
                Some(r) if r.start <= r.end && r.end <= split.len() => r,
                _ => bail!("--cases `{selector}` is not train, val, test, all or a range within 0..{}", split.len()),
            }
        }
    };
    Ok(range)
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkParameters> {
    let file = if path.is_dir() { path.join(STUDENT_FILE) } else { path.to_path_buf() };
    checkpoint::load(&file).with_context(|| format!("loading checkpoint {}", file.display()))
}

/// Unwraps per-case results, or fails listing every failing case id.
pub fn collect_cases<T>(results: Vec<(usize, Result<T>)>) -> Result<Vec<(usize, T)>> {
    let total = results.len();
    let mut ok = Vec::with_capacity(total);
    let mut failed = Vec::new();
    for (id, r) in results {
        match r {
            Ok(v) => ok.push((id, v)),
            Err(e) => {
                eprintln!("case {id}: {e:#}");
                failed.push(id.to_string());
            }
        }
    }
    if !failed.is_empty() {
        bail!("{} of {total} cases failed: {}", failed.len(), failed.join(", "));
    }
    Ok(ok)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn case_selection() {
        let split = DatasetSplit::with_sizes(8, 1, 1);
        assert_eq!(select_cases("test", &split).unwrap(), 9..10);
        assert_eq!(select_cases("all", &split).unwrap(), 0..10);
        assert_eq!(select_cases("2..5", &split).unwrap(), 2..5);
        assert!(select_cases("5..11", &split).is_err());
        assert!(select_cases("holdout", &split).is_err());
    }

    #[test]
    fn override_parsing() {
        assert_eq!(split_override("train.lr = 0.1").unwrap(), ("train.lr".into(), "0.1".into()));
        assert!(split_override("train.lr").is_err());
        assert!(split_override("=1").is_err());
    }
}
