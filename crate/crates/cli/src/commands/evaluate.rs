use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use ddfflow::flow::SamplerConfig;
use ddfflow::fvol::{read_field, write_atomic};
use ddfflow::metrics::{evaluate_case, summarize, Direction, EvalReport, ReportSummary};
use ddfflow::network::Model;
use ddfflow::synth::{case_dir_name, parse_key_values, read_case};
use serde::Serialize;

use super::register::{case_seed, predict, FIELD_FILE, RECORD_FILE};
use super::{collect_cases, dataset_split, load_checkpoint, load_config, prepare_out, required_path, select_cases};
use crate::par::map_with;
use crate::EvaluateArgs;

#[derive(Serialize)]
struct CaseReport {
    case_id: usize,
    #[serde(flatten)]
    report: EvalReport,
}

#[derive(Serialize)]
struct ReportFile<'a> {
    cases: &'a [CaseReport],
    summary: ReportSummary,
}

#[derive(Serialize)]
struct SweepRow {
    steps: usize,
    summary: ReportSummary,
}

fn recorded_seconds(dir: &Path) -> Result<f64> {
    let path = dir.join(RECORD_FILE);
    if !path.exists() {
        return Ok(0.0);
    }
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let kv = parse_key_values(&text, "registration record")?;
    match kv.get("seconds") {
        Some(v) => v.parse().with_context(|| format!("seconds in {}", path.display())),
        None => Ok(0.0),
    }
}

fn csv_table(rows: impl Iterator<Item = (String, EvalReport)>, first: &str) -> String {
    let mut s = format!("{first},{}\n", EvalReport::csv_header());
    for (key, r) in rows {
        let _ = writeln!(s, "{key},{}", r.to_csv_row());
    }
    s
}

fn write_reports(out: &Path, cases: &[CaseReport]) -> Result<ReportSummary> {
    let reports: Vec<EvalReport> = cases.iter().map(|c| c.report.clone()).collect();
    let summary = summarize(&reports);
    let per_case = csv_table(cases.iter().map(|c| (c.case_id.to_string(), c.report.clone())), "case_id");
    write_atomic(&out.join("report.csv"), per_case.as_bytes())?;
    let stats = csv_table(
        [("mean".to_string(), summary.mean.clone()), ("sd".to_string(), summary.sd.clone())].into_iter(),
        "stat",
    );
    write_atomic(&out.join("summary.csv"), stats.as_bytes())?;
    let json = serde_json::to_string_pretty(&ReportFile {
        cases,
        summary: summary.clone(),
    })?;
    write_atomic(&out.join("report.json"), json.as_bytes())?;
    Ok(summary)
}

fn print_summary(label: &str, s: &ReportSummary) {
    let (m, d) = (&s.mean, &s.sd);
    println!(
        "{label}: n={} dice_fg {:.4}±{:.4} dice_mean {:.4}±{:.4} %negjac {:.3} lvef_mae {:.2} mt_mae {:.3} mm",
        s.n, m.dice_fg, d.dice_fg, m.dice_mean, d.dice_mean, m.pct_negjac, m.lvef_mae, m.mt_mae
    );
}

pub fn run(args: EvaluateArgs) -> Result<()> {
    let cfg = load_config(&args.common, Vec::new())?;
    let data = required_path(args.data, &cfg.run.data, "data")?;
    let split = dataset_split(&data)?;
    let ids: Vec<usize> = select_cases(&args.cases, &split)?.collect();
    let out = &args.common.out;
    let threads = args.common.threads as usize;

    if !args.sweep_steps.is_empty() {
        let ckpt = required_path(args.checkpoint, &cfg.run.checkpoint, "checkpoint")?;
        let params = load_checkpoint(&ckpt)?;
        prepare_out(out, &cfg)?;
        let mut rows = Vec::new();
        for &steps in &args.sweep_steps {
            let sampler = cfg.sampler_with_steps(steps as usize);
            let results = map_with(&ids, threads, || Model::new(params.clone()), |model, &id| {
                let mut run = || -> Result<EvalReport> {
                    let case = read_case(&data.join(case_dir_name(id)))?;
                    let (fixed, moving) = case.es_to_ed();
                    let sc = SamplerConfig {
                        seed: case_seed(cfg.sampler.seed, id),
                        ..sampler.clone()
                    };
                    let started = Instant::now();
                    let field = predict(model, fixed, moving, &sc, &cfg)?;
                    let seconds = started.elapsed().as_secs_f64();
                    Ok(evaluate_case(&case.ed_labels, &case.es_labels, &field, Direction::EsToEd, seconds)?)
                };
                (id, run())
            });
            let reports: Vec<EvalReport> = collect_cases(results)
                .with_context(|| format!("sweep at {steps} steps"))?
                .into_iter()
                .map(|(_, r)| r)
                .collect();
            let summary = summarize(&reports);
            print_summary(&format!("steps {steps:>2}"), &summary);
            rows.push(SweepRow {
                steps: steps as usize,
                summary,
            });
        }
        let table = csv_table(rows.iter().map(|r| (r.steps.to_string(), r.summary.mean.clone())), "steps");
        write_atomic(&out.join("sweep.csv"), table.as_bytes())?;
        write_atomic(&out.join("sweep.json"), serde_json::to_string_pretty(&rows)?.as_bytes())?;
        return Ok(());
    }

    let predictions = required_path(args.predictions, &cfg.run.predictions, "predictions")?;
    if !predictions.is_dir() {
        bail!("predictions path {} does not exist", predictions.display());
    }
    prepare_out(out, &cfg)?;
    let results = map_with(&ids, threads, || (), |_, &id| {
        let run = || -> Result<EvalReport> {
            let case = read_case(&data.join(case_dir_name(id)))?;
            let dir = predictions.join(case_dir_name(id));
            let path = dir.join(FIELD_FILE);
            if !path.exists() {
                bail!("missing prediction {}", path.display());
            }
            let field = read_field(&path)?;
            let seconds = recorded_seconds(&dir)?;
            Ok(evaluate_case(&case.ed_labels, &case.es_labels, &field, Direction::EsToEd, seconds)?)
        };
        (id, run())
    });
    let cases: Vec<CaseReport> = collect_cases(results)?
        .into_iter()
        .map(|(case_id, report)| CaseReport { case_id, report })
        .collect();
    let summary = write_reports(out, &cases)?;
    print_summary("evaluated", &summary);
    Ok(())
}
