use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use ddfflow::flow::{instance_optimise, sample, SamplerConfig};
use ddfflow::fvol::{read_volume, write_atomic, write_field, write_volume};
use ddfflow::network::Model;
use ddfflow::synth::{case_dir_name, read_case};
use ddfflow::volume::warp_image;
use ddfflow::{DisplacementField, Volume};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{collect_cases, dataset_split, load_checkpoint, load_config, prepare_out, required_path, select_cases};
use crate::config::RunConfig;
use crate::par::map_with;
use crate::{RegisterArgs, SamplerFlags};

pub const FIELD_FILE: &str = "field.fvol";
pub const WARPED_FILE: &str = "warped.fvol";
pub const RECORD_FILE: &str = "register.txt";

/// Sampler seed for one dataset case.
pub fn case_seed(sampler_seed: u64, id: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(sampler_seed);
    rng.set_stream(id as u64 + 1);
    rng.next_u64()
}

fn flag_overrides(f: &SamplerFlags) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut push = |k: &str, v: String| out.push((k.to_string(), v));
    if let Some(n) = f.steps {
        push("sampler.steps", n.to_string());
    }
    if let Some(v) = f.eta {
        push("sampler.eta", v.to_string());
    }
    if let Some(v) = f.lambda_g {
        push("sampler.lambda_g", v.to_string());
    }
    for (off, key) in [
        (f.no_sde, "sampler.use_sde"),
        (f.no_heun, "sampler.use_heun"),
        (f.no_ig, "sampler.use_ig"),
        (f.no_guidance, "sampler.use_guidance"),
    ] {
        if off {
            push(key, "false".into());
        }
    }
    if let Some(v) = f.instance_opt_steps {
        push("run.instance_opt_steps", v.to_string());
    }
    if let Some(v) = f.instance_opt_lr {
        push("run.instance_opt_lr", v.to_string());
    }
    out
}

/// Sampler output, refined by instance optimisation when configured.
pub fn predict(model: &mut Model, fixed: &Volume, moving: &Volume, sampler: &SamplerConfig, cfg: &RunConfig) -> Result<DisplacementField> {
    let field = sample(model, fixed, moving, sampler, &cfg.train.loss)?;
    if cfg.run.instance_opt_steps == 0 {
        return Ok(field);
    }
    let (refined, _) = instance_optimise(
        fixed,
        moving,
        &field,
        cfg.run.instance_opt_steps,
        cfg.run.instance_opt_lr,
        &cfg.train.loss,
    )?;
    Ok(refined)
}

fn write_outputs(dir: &Path, moving: &Volume, field: &DisplacementField, seconds: f64, cfg: &RunConfig, id: Option<usize>) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_field(&dir.join(FIELD_FILE), field)?;
    write_volume(&dir.join(WARPED_FILE), &warp_image(moving, field)?)?;
    let mut s = String::new();
    if let Some(id) = id {
        let _ = writeln!(s, "case_id = {id}");
    }
    let _ = writeln!(s, "steps = {}", cfg.sampler.steps);
    let _ = writeln!(s, "instance_opt_steps = {}", cfg.run.instance_opt_steps);
    let _ = writeln!(s, "seconds = {seconds}");
    write_atomic(&dir.join(RECORD_FILE), s.as_bytes())?;
    Ok(())
}

pub fn run(args: RegisterArgs) -> Result<()> {
    let cfg = load_config(&args.common, flag_overrides(&args.sampler))?;
    let ckpt = required_path(args.checkpoint, &cfg.run.checkpoint, "checkpoint")?;
    let params = load_checkpoint(&ckpt)?;
    let out = &args.common.out;

    if let (Some(fixed), Some(moving)) = (&args.fixed, &args.moving) {
        let fixed = read_volume(fixed).with_context(|| format!("reading {}", fixed.display()))?;
        let moving = read_volume(moving).with_context(|| format!("reading {}", moving.display()))?;
        prepare_out(out, &cfg)?;
        let started = Instant::now();
        let field = predict(&mut Model::new(params), &fixed, &moving, &cfg.sampler, &cfg)?;
        let seconds = started.elapsed().as_secs_f64();
        write_outputs(out, &moving, &field, seconds, &cfg, None)?;
        println!("registered pair in {seconds:.3} s; field written to {}", out.join(FIELD_FILE).display());
        return Ok(());
    }

    let data = required_path(args.data, &cfg.run.data, "data")?;
    let split = dataset_split(&data)?;
    let ids: Vec<usize> = select_cases(&args.cases, &split)?.collect();
    prepare_out(out, &cfg)?;
    let results = map_with(&ids, args.common.threads as usize, || Model::new(params.clone()), |model, &id| {
        let mut run = || -> Result<f64> {
            let case = read_case(&data.join(case_dir_name(id)))?;
            let sampler = SamplerConfig {
                seed: case_seed(cfg.sampler.seed, id),
                ..cfg.sampler.clone()
            };
            let (fixed, moving) = case.es_to_ed();
            let started = Instant::now();
            let field = predict(model, fixed, moving, &sampler, &cfg)?;
            let seconds = started.elapsed().as_secs_f64();
            write_outputs(&out.join(case_dir_name(id)), moving, &field, seconds, &cfg, Some(id))?;
            Ok(seconds)
        };
        (id, run())
    });
    for (id, seconds) in collect_cases(results)? {
        println!("case {id}: {seconds:.3} s");
    }
    println!("registered {} cases into {}", ids.len(), out.display());
    Ok(())
}
