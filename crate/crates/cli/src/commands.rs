use std::fmt::Write as _;
use std::path::Path;

use cmil::dataset::Dataset;
use cmil::experiment::{
    ablation_variants, run_grid, schedule_variants, shrinkage_violations, subset_trace_csv,
    summarize, summary_csv, trials_csv, Trial, VariantSummary,
};
use cmil::io::write_atomic;
use cmil::train::{architecture_for, initial_params, median, train_monitored};
use cmil::{
    check_gradients, evaluate, read_dataset, write_dataset, Error, LossSettings,
    ModelParams, Result, Schedule, TrainConfig,
};
use log::info;
use serde::Serialize;

use crate::config::RunConfig;

/// Outcome of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    CheckFailed,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("cannot serialise {}: {e}", path.display())))?;
    write_text(path, &(text + "\n"))
}

pub fn generate(cfg: &RunConfig) -> Result<Status> {
    let bench = cfg.benchmark();
    let ext = cfg.format.extension();
    let train_path = cfg.out_dir.join(format!("train.{ext}"));
    let test_path = cfg.out_dir.join(format!("test.{ext}"));
    write_dataset(&train_path, &Dataset::from_bags(bench.train_set(cfg.synth.seed)?)?)?;
    write_dataset(&test_path, &Dataset::from_bags(bench.test_set(cfg.synth.seed)?)?)?;
    cfg.echo()?;
    println!("wrote {} ({} bags)", train_path.display(), cfg.train_bags);
    println!("wrote {} ({} bags)", test_path.display(), cfg.test_bags);
    Ok(Status::Ok)
}

fn load_or_generate(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data {
        Some(path) => read_dataset(path),
        None => Dataset::from_bags(cfg.benchmark().train_set(cfg.synth.seed)?),
    }
}

pub fn train(cfg: &RunConfig) -> Result<Status> {
    let dataset = load_or_generate(cfg)?;
    let out = &cfg.out_dir;
    cfg.echo()?;
    let every = cfg.checkpoint_every;
    let epochs = cfg.train.epochs;
    let (params, log) = train_monitored(&dataset.bags, &cfg.train, &cfg.eval, |epoch, params| {
        info!("epoch {}/{epochs} done", epoch + 1);
        if every > 0 && (epoch + 1) % every == 0 {
            params.write_checkpoint(&out.join(format!("checkpoints/epoch-{:04}.ckpt", epoch + 1)))?;
        }
        Ok(())
    })?;
    params.write_checkpoint(&out.join("model.ckpt"))?;
    write_text(&out.join("log.csv"), &log.to_csv())?;
    write_text(&out.join("steps.csv"), &log.steps_csv())?;
    write_text(&out.join("subsets.csv"), &subset_trace_csv(&log))?;
    if let Some(last) = log.last() {
        println!(
            "trained {} epochs on {} bags: loss {:.4}, train CorLoc {:.2}, train mAP {:.2}",
            epochs,
            dataset.bags.len(),
            last.mean_loss,
            100.0 * last.corloc,
            100.0 * last.map
        );
    }
    println!("wrote {}", out.display());
    Ok(Status::Ok)
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, data: &Path) -> Result<Status> {
    let params = ModelParams::read_checkpoint(checkpoint)?;
    let dataset = read_dataset(data)?;
    let arch = params.architecture();
    if arch.classes != dataset.classes || arch.dim != dataset.dim {
        return Err(Error::Config(format!(
            "checkpoint {} expects {} classes and {} features, dataset {} has {} and {}",
            checkpoint.display(),
            arch.classes,
            arch.dim,
            data.display(),
            dataset.classes,
            dataset.dim
        )));
    }
    let report = evaluate(&dataset.bags, &params, &cfg.eval);
    cfg.echo()?;
    write_json(&cfg.out_dir.join("metrics.json"), &report)?;
    println!("{report}");
    Ok(Status::Ok)
}

fn dir_name(variant: &str) -> String {
    variant
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

/// Writes per-seed rows, aggregates and per-run logs.
fn write_grid(out: &Path, trials: &[Trial], summary: &[VariantSummary]) -> Result<()> {
    write_text(&out.join("trials.csv"), &trials_csv(trials))?;
    write_text(&out.join("summary.csv"), &summary_csv(summary))?;
    for t in trials {
        let dir = out.join(dir_name(&t.variant)).join(format!("seed-{}", t.seed));
        write_text(&dir.join("log.csv"), &t.log.to_csv())?;
        write_text(&dir.join("subsets.csv"), &subset_trace_csv(&t.log))?;
        write_json(&dir.join("metrics.json"), &t.test)?;
    }
    Ok(())
}

fn print_summary(summary: &[VariantSummary]) {
    println!(
        "{:<16} {:>5} {:>18} {:>18}",
        "variant", "seeds", "mAP median (IQR)", "CorLoc median (IQR)"
    );
    for s in summary {
        println!(
            "{:<16} {:>5} {:>10.2} ({:>5.2}) {:>10.2} ({:>5.2})",
            s.variant,
            s.seeds,
            100.0 * s.map.median,
            100.0 * s.map.iqr(),
            100.0 * s.corloc.median,
            100.0 * s.corloc.iqr()
        );
    }
}

fn per_seed<'a>(trials: &'a [Trial], variant: &str) -> Vec<&'a Trial> {
    let mut v: Vec<&Trial> = trials.iter().filter(|t| t.variant == variant).collect();
    v.sort_by_key(|t| t.seed);
    v
}

/// Lambda per epoch under every schedule, for plotting.
fn schedules_csv(epochs: usize) -> Result<String> {
    let kinds = cmil::ScheduleKind::ALL;
    let mut out = String::from("epoch");
    for k in kinds {
        out.push(',');
        out.push_str(k.name());
    }
    out.push('\n');
    for e in 0..epochs {
        let _ = write!(out, "{e}");
        for k in kinds {
            let _ = write!(out, ",{:?}", Schedule::new(k).epoch_lambda(e, epochs)?);
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn sweep(cfg: &RunConfig, check: bool) -> Result<Status> {
    let bench = cfg.benchmark();
    let variants = schedule_variants(&cfg.train);
    cfg.echo()?;
    info!("{} variants x {} seeds", variants.len(), cfg.seeds.len());
    let trials = run_grid(&bench, &variants, &cfg.seeds)?;
    let summary = summarize(&trials);
    write_grid(&cfg.out_dir, &trials, &summary)?;
    write_text(&cfg.out_dir.join("schedules.csv"), &schedules_csv(cfg.train.epochs)?)?;
    print_summary(&summary);

    let log = per_seed(&trials, "log");
    let mil = per_seed(&trials, "mil");
    let gains: Vec<f64> = log
        .iter()
        .zip(&mil)
        .map(|(a, b)| a.test.mean_corloc - b.test.mean_corloc)
        .collect();
    let wins = gains.iter().filter(|&&g| g > 0.0).count();
    let gain = median(&gains);
    let worst_shrink = log
        .iter()
        .map(|t| shrinkage_violations(&t.log.median_subsets()))
        .max()
        .unwrap_or(0);
    println!(
        "log vs mil: wins {wins}/{}, median CorLoc gain {:+.2}; subset-size increases per run at most {worst_shrink}",
        gains.len(),
        100.0 * gain
    );
    if !check {
        return Ok(Status::Ok);
    }
    let ok = wins >= cfg.check.min_wins
        && gain >= cfg.check.min_corloc_gain
        && worst_shrink <= cfg.check.max_shrink_violations;
    println!("check: {}", if ok { "PASS" } else { "FAIL" });
    Ok(if ok { Status::Ok } else { Status::CheckFailed })
}

pub fn ablate(cfg: &RunConfig, check: bool) -> Result<Status> {
    let bench = cfg.benchmark();
    let variants = ablation_variants(&cfg.train);
    cfg.echo()?;
    info!("{} variants x {} seeds", variants.len(), cfg.seeds.len());
    let trials = run_grid(&bench, &variants, &cfg.seeds)?;
    let summary = summarize(&trials);
    write_grid(&cfg.out_dir, &trials, &summary)?;
    print_summary(&summary);
    let med = |name: &str| {
        summary
            .iter()
            .find(|s| s.variant == name)
            .map_or(f64::NAN, |s| s.map.median)
    };
    let (both, sel, det, neither) = (
        med("both"),
        med("selector-only"),
        med("detector-only"),
        med("neither"),
    );
    let ok = both >= sel && sel >= neither && both >= det && det >= neither;
    println!(
        "median mAP ordering both >= single >= neither: {}",
        if ok { "holds" } else { "violated" }
    );
    if !check {
        return Ok(Status::Ok);
    }
    println!("check: {}", if ok { "PASS" } else { "FAIL" });
    Ok(if ok { Status::Ok } else { Status::CheckFailed })
}

#[derive(Serialize)]
struct GradcheckRow {
    lambda: f64,
    report: cmil::train::GradientReport,
}

pub fn gradcheck(cfg: &RunConfig) -> Result<Status> {
    let g = &cfg.gradcheck;
    let bags = cmil::generate(&cfg.synth.split(cfg.synth.seed, g.bags))?;
    let arch = architecture_for(&bags, cfg.train.hidden)?;
    let params = initial_params(
        arch,
        &TrainConfig {
            init_scale: g.param_scale,
            ..cfg.train.clone()
        },
    );
    cfg.echo()?;
    let mut rows = Vec::new();
    let mut ok = true;
    println!("{:>7} {:>8} {:>6} {:>10} {:>12}", "lambda", "checked", "kinks", "structure", "max rel err");
    for &lambda in &g.lambdas {
        let settings = LossSettings {
            reduction: cfg.train.reduction,
            ..LossSettings::uniform(lambda)
        };
        let report = check_gradients(&bags, &params, &settings, g.coords_per_bag, cfg.train.seed)?;
        println!(
            "{:>7.3} {:>8} {:>6} {:>10} {:>12.2e}",
            lambda, report.checked, report.skipped_kink, report.skipped_structure, report.max_rel_error
        );
        ok &= report.checked > 0 && report.max_rel_error < g.max_rel_error;
        rows.push(GradcheckRow { lambda, report });
    }
    write_json(&cfg.out_dir.join("gradcheck.json"), &rows)?;
    println!(
        "gradient check {} (tolerance {:e})",
        if ok { "passed" } else { "FAILED" },
        g.max_rel_error
    );
    Ok(if ok { Status::Ok } else { Status::CheckFailed })
}
