//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Three operations are exposed, each returning JSON text:
//! - [`schedule_curves`]: the five continuation schedules sampled on `[0, 1]`;
//! - [`Demo::view`]: one synthetic bag with its subset partition and detector
//!   pseudo-labels at a chosen `lambda`, under the current model;
//! - [`Demo::train`]: trains the model with the continuation objective or
//!   plain MIL and reports per-epoch progress.
//!
//! The logic lives in plain Rust so it is testable natively.

use cmil::objective::{assign_labels, partition_subsets, InstanceLabel};
use cmil::synthdata::{generate_detailed, GeneratedBag, ProposalKind};
use cmil::train::{architecture_for, initial_params};
use cmil::{
    train, Bag, ModelParams, Objective, Schedule, ScheduleKind, SynthConfig, TrainConfig,
};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct Curves {
    t: Vec<f64>,
    curves: Vec<(String, Vec<f64>)>,
}

fn curves(points: usize) -> Curves {
    let points = points.max(2);
    let t: Vec<f64> = (0..points).map(|i| i as f64 / (points - 1) as f64).collect();
    let curves = ScheduleKind::ALL
        .iter()
        .map(|&k| {
            let s = Schedule::new(k);
            (k.name().to_string(), t.iter().map(|&x| s.lambda_at(x)).collect())
        })
        .collect();
    Curves { t, curves }
}

/// Every schedule with its default shape, sampled at `points` evenly spaced
/// values of training progress.
#[wasm_bindgen]
pub fn schedule_curves(points: usize) -> String {
    serde_json::to_string(&curves(points)).expect("plain data serialises")
}

#[derive(Serialize)]
pub struct BagView {
    pub id: String,
    pub class: Option<usize>,
    pub object: Option<[f64; 4]>,
    pub part: Option<[f64; 4]>,
    pub boxes: Vec<[f64; 4]>,
    pub kinds: Vec<&'static str>,
    pub scores: Vec<f64>,
    /// Subset index of every instance.
    pub subset_of: Vec<usize>,
    pub num_subsets: usize,
    /// Members of the highest-scoring subset.
    pub selected: Vec<usize>,
    pub anchor: usize,
    /// `"pos"`, `"neg"` or `"ignore"` per instance.
    pub labels: Vec<&'static str>,
}

#[derive(Serialize)]
pub struct EpochView {
    pub epoch: usize,
    pub lambda: f64,
    pub loss: f64,
    pub corloc: f64,
    pub map: f64,
    pub median_subset: f64,
}

fn kind_name(k: ProposalKind) -> &'static str {
    match k {
        ProposalKind::Full => "full",
        ProposalKind::Part => "part",
        ProposalKind::Partial => "partial",
        ProposalKind::Background => "background",
    }
}

fn corners(b: &cmil::BBox) -> [f64; 4] {
    [b.x1, b.y1, b.x2, b.y2]
}

/// A small synthetic dataset and a model trained on it.
#[wasm_bindgen]
pub struct Demo {
    detailed: Vec<GeneratedBag>,
    bags: Vec<Bag>,
    params: ModelParams,
}

impl Demo {
    pub fn create(seed: u64, num_bags: usize) -> cmil::Result<Demo> {
        let synth = SynthConfig::default().split(seed, num_bags.max(1));
        let detailed = generate_detailed(&synth)?;
        let bags: Vec<Bag> = detailed.iter().map(|g| g.bag.clone()).collect();
        let params = initial_params(architecture_for(&bags, 0)?, &TrainConfig::default());
        Ok(Demo {
            detailed,
            bags,
            params,
        })
    }

    pub fn bag_view(&self, index: usize, lambda: f64) -> cmil::Result<BagView> {
        let g = self.detailed.get(index).ok_or_else(|| {
            cmil::Error::Precondition(format!("bag {index} of {}", self.detailed.len()))
        })?;
        let class = g.layout.map_or(0, |l| l.class);
        let scores: Vec<f64> = g
            .bag
            .instances
            .iter()
            .map(|i| self.params.selector_scores(&i.features)[class])
            .collect();
        let lambda = lambda.clamp(0.0, 1.0);
        let partition = partition_subsets(&g.bag, &scores, lambda)?;
        let (best, _) = partition.best_subset(&scores);
        let anchor = partition.seeds[best];
        let mut subset_of = vec![0; g.bag.len()];
        for (k, members) in partition.subsets.iter().enumerate() {
            for &j in members {
                subset_of[j] = k;
            }
        }
        let labels = assign_labels(&g.bag, anchor, lambda, class)?
            .labels
            .into_iter()
            .map(|l| match l {
                InstanceLabel::Positive => "pos",
                InstanceLabel::Negative => "neg",
                InstanceLabel::Ignore => "ignore",
            })
            .collect();
        Ok(BagView {
            id: g.bag.id.clone(),
            class: g.layout.map(|l| l.class),
            object: g.layout.map(|l| corners(&l.object)),
            part: g.layout.map(|l| corners(&l.part)),
            boxes: g.bag.instances.iter().map(|i| corners(&i.bbox)).collect(),
            kinds: g.kinds.iter().map(|&k| kind_name(k)).collect(),
            scores,
            subset_of,
            num_subsets: partition.len(),
            selected: partition.subsets[best].clone(),
            anchor,
            labels,
        })
    }

    pub fn run_training(
        &mut self,
        schedule: &str,
        objective: &str,
        epochs: usize,
    ) -> cmil::Result<Vec<EpochView>> {
        let objective = match objective {
            "mil" => Objective::Mil,
            "continuation" => Objective::Continuation,
            other => {
                return Err(cmil::Error::Config(format!("unknown objective `{other}`")));
            }
        };
        let config = TrainConfig {
            epochs: epochs.max(1),
            schedule: Schedule::new(schedule.parse()?),
            objective,
            ..TrainConfig::default()
        };
        let (params, log) = train(&self.bags, &config)?;
        self.params = params;
        Ok(log
            .epochs
            .iter()
            .map(|r| EpochView {
                epoch: r.epoch,
                lambda: r.lambda,
                loss: r.mean_loss,
                corloc: r.corloc,
                map: r.map,
                median_subset: r.median_subset,
            })
            .collect())
    }
}

fn js_err(e: cmil::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, num_bags: usize) -> Result<Demo, JsError> {
        Demo::create(seed, num_bags).map_err(js_err)
    }

    #[wasm_bindgen(js_name = bagCount)]
    pub fn bag_count(&self) -> usize {
        self.bags.len()
    }

    /// JSON [`BagView`] of bag `index` at `lambda`.
    pub fn view(&self, index: usize, lambda: f64) -> Result<String, JsError> {
        let v = self.bag_view(index, lambda).map_err(js_err)?;
        Ok(serde_json::to_string(&v).expect("plain data serialises"))
    }

    /// Retrains from scratch; returns a JSON list of [`EpochView`].
    pub fn train(&mut self, schedule: &str, objective: &str, epochs: usize) -> Result<String, JsError> {
        let log = self.run_training(schedule, objective, epochs).map_err(js_err)?;
        Ok(serde_json::to_string(&log).expect("plain data serialises"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curves_start_at_zero_and_end_at_one() {
        let c = curves(11);
        assert_eq!(c.t.len(), 11);
        assert_eq!(c.curves.len(), 5);
        for (name, ys) in &c.curves {
            assert!(ys[0].abs() < 1e-12, "{name}");
            assert!((ys[10] - 1.0).abs() < 1e-12, "{name}");
        }
        assert!(schedule_curves(3).starts_with("{\"t\":[0.0,0.5,1.0]"));
    }

    #[test]
    fn view_partitions_every_instance() {
        let demo = Demo::create(1, 6).unwrap();
        for lambda in [0.0, 0.5, 1.0] {
            let v = demo.bag_view(0, lambda).unwrap();
            assert_eq!(v.subset_of.len(), v.boxes.len());
            assert!(v.subset_of.iter().all(|&k| k < v.num_subsets));
            assert!(v.selected.contains(&v.anchor));
            assert_eq!(v.labels[v.anchor], "pos");
        }
        assert_eq!(demo.bag_view(0, 0.0).unwrap().num_subsets, 1);
        assert!(demo.bag_view(99, 0.5).is_err());
    }

    #[test]
    fn training_reports_every_epoch() {
        let mut demo = Demo::create(2, 20).unwrap();
        let log = demo.run_training("log", "continuation", 3).unwrap();
        assert_eq!(log.len(), 3);
        assert_eq!(log[2].lambda, 1.0);
        assert!(demo.run_training("log", "nope", 1).is_err());
        assert!(demo.run_training("cubic", "mil", 1).is_err());
    }
}
