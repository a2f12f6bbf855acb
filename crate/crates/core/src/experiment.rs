//! Multi-seed experiments on the synthetic benchmark.
//!
//! For seed `s` the training split is generated with seed `s` and the test
//! split with seed `s + TEST_SEED_OFFSET`; both share the class directions.
//! The training run itself is also seeded with `s`.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::{evaluate, EvalConfig, MetricReport};
use crate::geometry::iou;
use crate::model::{Bag, ModelParams};
use crate::schedule::{Schedule, ScheduleKind};
use crate::synthdata::{generate, generate_detailed, SynthConfig};
use crate::train::{median, train, train_with, TrainConfig, TrainLog};

pub const TEST_SEED_OFFSET: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Benchmark {
    pub synth: SynthConfig,
    pub train_bags: usize,
    pub test_bags: usize,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for Benchmark {
    fn default() -> Self {
        Benchmark {
            synth: SynthConfig::default(),
            train_bags: 200,
            test_bags: 100,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Benchmark {
    pub fn train_set(&self, seed: u64) -> Result<Vec<Bag>> {
        generate(&self.synth.split(seed, self.train_bags))
    }

    pub fn test_set(&self, seed: u64) -> Result<Vec<Bag>> {
        generate(&self.synth.split(seed + TEST_SEED_OFFSET, self.test_bags))
    }
}

/// A named training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub config: TrainConfig,
}

impl Variant {
    pub fn new(name: impl Into<String>, config: TrainConfig) -> Self {
        Variant {
            name: name.into(),
            config,
        }
    }
}

/// The five schedules followed by the plain MIL baseline (`mil`).
pub fn schedule_variants(base: &TrainConfig) -> Vec<Variant> {
    let mut out: Vec<Variant> = ScheduleKind::ALL
        .iter()
        .map(|&kind| {
            Variant::new(
                kind.name(),
                TrainConfig {
                    schedule: Schedule::new(kind),
                    ..base.clone()
                },
            )
        })
        .collect();
    out.push(Variant::new("mil", base.mil_baseline()));
    out
}

/// The 2x2 grid over continuation of the selector and of the detector, named
/// `both`, `selector-only`, `detector-only` and `neither`.
pub fn ablation_variants(base: &TrainConfig) -> Vec<Variant> {
    let cell = |name: &str, sel: bool, det: bool| {
        Variant::new(
            name,
            TrainConfig {
                continuation_selector: sel,
                continuation_detector: det,
                ..base.clone()
            },
        )
    };
    vec![
        cell("both", true, true),
        cell("selector-only", true, false),
        cell("detector-only", false, true),
        cell("neither", false, false),
    ]
}

/// Result of one (variant, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub variant: String,
    pub seed: u64,
    pub test: MetricReport,
    pub log: TrainLog,
}

/// Trains one variant on one seed and evaluates on the held-out split.
pub fn run_trial(bench: &Benchmark, variant: &Variant, seed: u64) -> Result<(Trial, ModelParams)> {
    let train_set = bench.train_set(seed)?;
    let test_set = bench.test_set(seed)?;
    let config = TrainConfig {
        seed,
        ..variant.config.clone()
    };
    let (params, log) = train(&train_set, &config)?;
    let test = evaluate(&test_set, &params, &bench.eval);
    Ok((
        Trial {
            variant: variant.name.clone(),
            seed,
            test,
            log,
        },
        params,
    ))
}

/// Runs every (variant, seed) pair in parallel. Output is ordered by variant,
/// then seed, regardless of scheduling.
pub fn run_grid(bench: &Benchmark, variants: &[Variant], seeds: &[u64]) -> Result<Vec<Trial>> {
    let jobs: Vec<(&Variant, u64)> = variants
        .iter()
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    jobs.par_iter()
        .map(|(v, s)| run_trial(bench, v, *s).map(|(t, _)| t))
        .collect()
}

/// Median and interquartile range of one metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Spread {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Spread {
            median: median(&v),
            q1: quantile(&v, 0.25),
            q3: quantile(&v, 0.75),
        }
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub seeds: usize,
    pub map: Spread,
    pub corloc: Spread,
}

/// Aggregates trials per variant, in order of first appearance.
pub fn summarize(trials: &[Trial]) -> Vec<VariantSummary> {
    let mut names: Vec<&str> = Vec::new();
    for t in trials {
        if !names.contains(&t.variant.as_str()) {
            names.push(&t.variant);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let rows: Vec<&Trial> = trials.iter().filter(|t| t.variant == name).collect();
            let map: Vec<f64> = rows.iter().map(|t| t.test.map).collect();
            let corloc: Vec<f64> = rows.iter().map(|t| t.test.mean_corloc).collect();
            VariantSummary {
                variant: name.to_string(),
                seeds: rows.len(),
                map: Spread::of(&map),
                corloc: Spread::of(&corloc),
            }
        })
        .collect()
}

/// Per-seed rows: `variant,seed,map,corloc,final_lambda,final_median_subset`.
pub fn trials_csv(trials: &[Trial]) -> String {
    let mut out = String::from("variant,seed,map,corloc,final_lambda,final_median_subset\n");
    for t in trials {
        let last = t.log.last();
        let _ = writeln!(
            out,
            "{},{},{:?},{:?},{:?},{:?}",
            t.variant,
            t.seed,
            t.test.map,
            t.test.mean_corloc,
            last.map_or(f64::NAN, |r| r.lambda),
            last.map_or(f64::NAN, |r| r.median_subset),
        );
    }
    out
}

/// Aggregate rows: `variant,seeds,map_median,map_q1,map_q3,corloc_median,corloc_q1,corloc_q3`.
pub fn summary_csv(summary: &[VariantSummary]) -> String {
    let mut out =
        String::from("variant,seeds,map_median,map_q1,map_q3,corloc_median,corloc_q1,corloc_q3\n");
    for s in summary {
        let _ = writeln!(
            out,
            "{},{},{:?},{:?},{:?},{:?},{:?},{:?}",
            s.variant,
            s.seeds,
            s.map.median,
            s.map.q1,
            s.map.q3,
            s.corloc.median,
            s.corloc.q1,
            s.corloc.q3
        );
    }
    out
}

/// Per-epoch median selected-subset size of one trial, as `epoch,lambda,median,mean`.
pub fn subset_trace_csv(log: &TrainLog) -> String {
    let mut out = String::from("epoch,lambda,median_subset,mean_subset\n");
    for r in &log.epochs {
        let _ = writeln!(
            out,
            "{},{:?},{:?},{:?}",
            r.epoch, r.lambda, r.median_subset, r.mean_subset
        );
    }
    out
}

/// Number of epochs whose median subset size exceeds the previous epoch's.
pub fn shrinkage_violations(medians: &[f64]) -> usize {
    medians.windows(2).filter(|w| w[1] > w[0]).count()
}

/// Fraction of positive (bag, class) pairs whose top selector instance
/// covers the part (IoU >= 0.5) but not the object (IoU < 0.5), after
/// `epochs` epochs of plain MIL training.
pub fn mil_part_dominance(
    synth: &SynthConfig,
    config: &TrainConfig,
    epochs: usize,
) -> Result<f64> {
    let detailed = generate_detailed(synth)?;
    let bags: Vec<Bag> = detailed.iter().map(|g| g.bag.clone()).collect();
    let mut snapshot = None;
    train_with(&bags, &config.mil_baseline(), |epoch, params| {
        if epoch + 1 == epochs {
            snapshot = Some(params.clone());
        }
        Ok(())
    })?;
    let params = snapshot.ok_or_else(|| {
        crate::error::Error::Config(format!(
            "probe epoch {epochs} exceeds the {} training epochs",
            config.epochs
        ))
    })?;
    let (mut hits, mut total) = (0usize, 0usize);
    for g in &detailed {
        let Some(layout) = g.layout else { continue };
        let scores: Vec<f64> = g
            .bag
            .instances
            .iter()
            .map(|i| params.selector_scores(&i.features)[layout.class])
            .collect();
        let top = crate::geometry::descending_order(scores.into_iter())[0];
        let b = g.bag.instances[top].bbox;
        total += 1;
        if iou(&b, &layout.object) < 0.5 && iou(&b, &layout.part) >= 0.5 {
            hits += 1;
        }
    }
    Ok(if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    })
}
