use std::path::Path;

use anyhow::{bail, Context, Result};
use ddfflow::network::{init_params, Workspace};
use ddfflow::synth::{parse_key_values, read_cases, PhantomCase};
use ddfflow::train::{fit, validation_loss, validation_noise, EpochRecord, FitOptions, ImagePair, MANIFEST_FILE};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{dataset_split, load_checkpoint, load_config, prepare_out, required_path};
use crate::config::RunConfig;
use crate::TrainArgs;

fn pairs(cases: &[PhantomCase]) -> Vec<ImagePair> {
    cases
        .iter()
        .map(|c| ImagePair {
            fixed: c.ed_image.clone(),
            moving: c.es_image.clone(),
        })
        .collect()
}

/// Recomputes the validation loss recorded next to a checkpoint.
fn check_resumed(dir: &Path, cfg: &RunConfig, params: &ddfflow::network::NetworkParameters, valset: &[ImagePair]) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let kv = parse_key_values(&text, "checkpoint manifest")?;
    let field = |k: &str| kv.get(k).with_context(|| format!("{} lacks `{k}`", path.display()));
    let recorded: f64 = field("val_loss")?.parse().context("val_loss")?;
    let seed: u64 = field("seed")?.parse().context("seed")?;
    let noise = validation_noise(valset, seed);
    let now = validation_loss(params, valset, &noise, &cfg.train.loss, &mut Workspace::new())?;
    println!("resumed {}: val_loss = {now} (recorded {recorded})", dir.display());
    if now.to_bits() != recorded.to_bits() {
        eprintln!("warning: validation loss differs from the recorded value; dataset or loss settings changed?");
    }
    Ok(())
}

pub fn run(args: TrainArgs) -> Result<()> {
    let cfg = load_config(&args.common, Vec::new())?;
    let data = required_path(args.data, &cfg.run.data, "data")?;
    let split = dataset_split(&data)?;
    let train_cases = read_cases(&data, split.train.clone()).context("reading training cases")?;
    let val_cases = read_cases(&data, split.val.clone()).context("reading validation cases")?;
    if train_cases.is_empty() || val_cases.is_empty() {
        bail!("dataset {} needs at least one training and one validation case", data.display());
    }
    let (trainset, valset) = (pairs(&train_cases), pairs(&val_cases));

    let initial = match &args.resume {
        Some(dir) => {
            let params = load_checkpoint(dir)?;
            check_resumed(dir, &cfg, &params, &valset)?;
            params
        }
        None => init_params(&cfg.network, &mut ChaCha8Rng::seed_from_u64(cfg.network.seed))?,
    };
    let out = &args.common.out;
    prepare_out(out, &cfg)?;
    println!(
        "training on {} cases, validating on {}; {} parameters",
        trainset.len(),
        valset.len(),
        initial.count()
    );
    let mut report = |r: &EpochRecord| {
        println!(
            "epoch {:>3}  train_loss {:.6}  val_loss {:.6}  {:.1} s",
            r.epoch, r.train_loss, r.val_loss, r.seconds
        );
    };
    let opts = FitOptions {
        checkpoint_dir: Some(out),
        on_epoch: Some(&mut report),
    };
    let outcome = fit(initial, &trainset, &valset, &cfg.train, opts)?;
    println!(
        "best epoch {} val_loss {}{}; checkpoint in {}",
        outcome.best_epoch,
        outcome.best_val_loss,
        if outcome.stopped_early { " (stopped early)" } else { "" },
        out.display()
    );
    Ok(())
}
