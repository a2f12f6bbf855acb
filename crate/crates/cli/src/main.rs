//! `cmil`: generate synthetic bags, train, evaluate, and run the schedule
//! sweep, ablation grid and gradient check.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime error,
//! 3 a `--check` threshold or the gradient tolerance was not met.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cmil::{Objective, Reduction, ScheduleKind};

use crate::config::{parse_seeds, schedule_overrides, DataFormat, Override};

#[derive(Parser)]
#[command(name = "cmil", version, about = "Continuation multiple instance learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic train and test datasets.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Dataset encoding.
        #[arg(long, value_parser = parse_format)]
        format: Option<DataFormat>,
    },
    /// Train one model; writes a checkpoint and the training log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset to train on [data]; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Write a checkpoint every K epochs (0 = only the final model).
        #[arg(long, value_name = "K")]
        checkpoint_every: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Compare the five schedules and plain MIL over several seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Exit with status 3 unless the log schedule beats plain MIL.
        #[arg(long)]
        check: bool,
    },
    /// 2x2 grid over selector and detector continuation.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Exit with status 3 unless the grid ordering holds.
        #[arg(long)]
        check: bool,
    },
    /// Compare analytic gradients against central differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

/// Options shared by every command. Each maps onto a config field.
#[derive(Args, Clone, Default)]
struct Common {
    /// TOML config file; see `config.toml` in any output directory.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override any config field, e.g. `--set synth.noise=0.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory [config: out_dir].
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Training seed [train.seed].
    #[arg(long)]
    seed: Option<u64>,
    /// Seeds of multi-seed commands: `0..10`, `0..=9` or `1,4,7` [seeds].
    #[arg(long)]
    seeds: Option<String>,
    /// Synthetic data seed [synth.seed].
    #[arg(long)]
    data_seed: Option<u64>,
    /// [train.epochs]
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate of the first half of training [train.lr].
    #[arg(long)]
    lr: Option<f64>,
    /// Learning rate of the second half [train.lr_late].
    #[arg(long)]
    lr_late: Option<f64>,
    /// [train.momentum]
    #[arg(long)]
    momentum: Option<f64>,
    /// [train.weight_decay]
    #[arg(long)]
    weight_decay: Option<f64>,
    /// linear, pwlinear, sigmoid, exp or log [train.schedule.kind].
    #[arg(long, value_parser = parse_schedule)]
    schedule: Option<ScheduleKind>,
    /// Schedule shape parameter [train.schedule.k].
    #[arg(long)]
    schedule_k: Option<f64>,
    /// continuation or mil [train.objective].
    #[arg(long, value_parser = parse_objective)]
    objective: Option<Objective>,
    /// Detector loss reduction, mean or sum [train.reduction].
    #[arg(long, value_parser = parse_reduction)]
    reduction: Option<Reduction>,
    /// [train.continuation_selector]
    #[arg(long)]
    continuation_selector: Option<bool>,
    /// [train.continuation_detector]
    #[arg(long)]
    continuation_detector: Option<bool>,
    /// Hidden width of both heads, 0 for linear [train.hidden].
    #[arg(long)]
    hidden: Option<usize>,
    /// Training bags of the synthetic benchmark [train_bags].
    #[arg(long)]
    bags: Option<usize>,
    /// Test bags of the synthetic benchmark [test_bags].
    #[arg(long)]
    test_bags: Option<usize>,
    /// Proposals per bag [synth.proposals_per_bag].
    #[arg(long)]
    proposals: Option<usize>,
    /// [synth.classes]
    #[arg(long)]
    classes: Option<usize>,
    /// Feature dimension [synth.dim].
    #[arg(long)]
    dim: Option<usize>,
    /// [synth.noise]
    #[arg(long)]
    noise: Option<f64>,
    /// [eval.nms_threshold]
    #[arg(long)]
    nms: Option<f64>,
}

fn parse_schedule(s: &str) -> Result<ScheduleKind, String> {
    s.parse().map_err(|e: cmil::Error| e.to_string())
}

fn parse_objective(s: &str) -> Result<Objective, String> {
    match s {
        "continuation" => Ok(Objective::Continuation),
        "mil" => Ok(Objective::Mil),
        _ => Err(format!("unknown objective `{s}` (expected continuation or mil)")),
    }
}

fn parse_reduction(s: &str) -> Result<Reduction, String> {
    s.parse().map_err(|e: cmil::Error| e.to_string())
}

fn parse_format(s: &str) -> Result<DataFormat, String> {
    match s {
        "jsonl" => Ok(DataFormat::Jsonl),
        "bin" => Ok(DataFormat::Bin),
        _ => Err(format!("unknown format `{s}` (expected jsonl or bin)")),
    }
}

impl Common {
    fn overrides(&self) -> cmil::Result<Vec<Override>> {
        let mut out: Vec<Override> = self
            .set
            .iter()
            .map(|s| Override::parse(s))
            .collect::<cmil::Result<_>>()?;
        let int = |v: usize| v as i64;
        let mut push = |path: &str, v: Option<toml::Value>| {
            if let Some(v) = v {
                out.push(Override::new(path, v));
            }
        };
        push("out_dir", self.out.as_ref().map(|p| p.display().to_string().into()));
        push("train.seed", self.seed.map(|v| (v as i64).into()));
        push("synth.seed", self.data_seed.map(|v| (v as i64).into()));
        push("train.epochs", self.epochs.map(|v| int(v).into()));
        push("train.lr", self.lr.map(Into::into));
        push("train.lr_late", self.lr_late.map(Into::into));
        push("train.momentum", self.momentum.map(Into::into));
        push("train.weight_decay", self.weight_decay.map(Into::into));
        push("train.objective", self.objective.map(|o| objective_name(o).into()));
        push("train.reduction", self.reduction.map(|r| reduction_name(r).into()));
        push("train.continuation_selector", self.continuation_selector.map(Into::into));
        push("train.continuation_detector", self.continuation_detector.map(Into::into));
        push("train.hidden", self.hidden.map(|v| int(v).into()));
        push("train_bags", self.bags.map(|v| int(v).into()));
        push("test_bags", self.test_bags.map(|v| int(v).into()));
        push("synth.proposals_per_bag", self.proposals.map(|v| int(v).into()));
        push("synth.classes", self.classes.map(|v| int(v).into()));
        push("synth.dim", self.dim.map(|v| int(v).into()));
        push("synth.noise", self.noise.map(Into::into));
        push("eval.nms_threshold", self.nms.map(Into::into));
        if let Some(s) = &self.seeds {
            let seeds = parse_seeds(s)?;
            push(
                "seeds",
                Some(toml::Value::Array(seeds.into_iter().map(|v| (v as i64).into()).collect())),
            );
        }
        out.extend(schedule_overrides(self.schedule, self.schedule_k));
        Ok(out)
    }

    fn resolve(&self, extra: Vec<Override>) -> cmil::Result<config::RunConfig> {
        let mut overrides = self.overrides()?;
        overrides.extend(extra);
        config::resolve(self.config.as_deref(), &overrides)
    }
}

fn objective_name(o: Objective) -> &'static str {
    match o {
        Objective::Continuation => "continuation",
        Objective::Mil => "mil",
    }
}

fn reduction_name(r: Reduction) -> &'static str {
    match r {
        Reduction::Mean => "mean",
        Reduction::Sum => "sum",
    }
}

fn run(cli: Cli) -> cmil::Result<commands::Status> {
    match cli.command {
        Command::Generate { common, format } => {
            let extra = format
                .map(|f| vec![Override::new("format", f.extension())])
                .unwrap_or_default();
            commands::generate(&common.resolve(extra)?)
        }
        Command::Train {
            common,
            data,
            checkpoint_every,
        } => {
            let mut extra = Vec::new();
            if let Some(k) = checkpoint_every {
                extra.push(Override::new("checkpoint_every", k as i64));
            }
            if let Some(path) = data {
                extra.push(Override::new("data", path.display().to_string()));
            }
            commands::train(&common.resolve(extra)?)
        }
        Command::Eval {
            common,
            checkpoint,
            data,
        } => commands::eval(&common.resolve(vec![])?, &checkpoint, &data),
        Command::Sweep { common, check } => commands::sweep(&common.resolve(vec![])?, check),
        Command::Ablate { common, check } => commands::ablate(&common.resolve(vec![])?, check),
        Command::Gradcheck { common } => commands::gradcheck(&common.resolve(vec![])?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(commands::Status::Ok) => ExitCode::SUCCESS,
        Ok(commands::Status::CheckFailed) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
