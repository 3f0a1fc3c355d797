use std::time::Instant;

use anyhow::{Context, Result};
use ddfflow::synth::{generate_seeded, write_dataset, DatasetSplit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{load_config, prepare_out};
use crate::par::map_with;
use crate::SynthArgs;

pub fn run(args: SynthArgs) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(n) = args.n_cases {
        flags.push(("run.n_cases".to_string(), n.to_string()));
    }
    let cfg = load_config(&args.common, flags)?;
    let started = Instant::now();
    let out = &args.common.out;

    // Same per-case seeds as `generate_dataset`, generated in parallel.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.phantom.seed);
    let seeds: Vec<(usize, u64)> = (0..cfg.run.n_cases).map(|id| (id, rng.gen())).collect();
    let cases = map_with(&seeds, args.common.threads as usize, || (), |_, &(id, seed)| {
        generate_seeded(&cfg.phantom, id, seed).with_context(|| format!("case {id}"))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()
    .context("phantom generation failed")?;

    prepare_out(out, &cfg)?;
    let split = DatasetSplit::for_len(cases.len());
    write_dataset(out, &cases, &split, &cfg.echo())?;
    println!(
        "wrote {} cases (train {:?}, val {:?}, test {:?}) to {} in {:.2} s",
        cases.len(),
        split.train,
        split.val,
        split.test,
        out.display(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}
