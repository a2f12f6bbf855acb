//! SGD-with-momentum training under a continuation schedule, plus a
//! finite-difference gradient checker.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig};
use crate::model::{Architecture, Bag, GradientBuffer, ModelParams};
use crate::objective::{mil_objective, total_loss_with, LossSettings, Reduction};
use crate::schedule::Schedule;

/// Which loss the optimizer descends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Continuation loss driven by the schedule and ablation flags.
    Continuation,
    /// Plain MIL: top-instance hinge and 0.5-IoU detector labels.
    Mil,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Learning rate for the first half of training.
    pub lr: f64,
    /// Learning rate for the second half.
    pub lr_late: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub schedule: Schedule,
    /// When false the selector uses `lambda = 1` throughout.
    pub continuation_selector: bool,
    /// When false detector pseudo-labels use `lambda = 1` thresholds throughout.
    pub continuation_detector: bool,
    pub objective: Objective,
    pub reduction: Reduction,
    /// Standard deviation of the initial output weights.
    pub init_scale: f64,
    /// Hidden width of both heads; 0 gives linear heads.
    pub hidden: usize,
    /// Advance `lambda` after every bag instead of every epoch.
    pub per_iteration_lambda: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            lr: 5e-3,
            lr_late: 5e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            schedule: Schedule::default(),
            continuation_selector: true,
            continuation_detector: true,
            objective: Objective::Continuation,
            reduction: Reduction::Mean,
            init_scale: 0.01,
            hidden: 0,
            per_iteration_lambda: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs < 2 {
            return fail(format!("epochs must be at least 2, got {}", self.epochs));
        }
        if !(self.lr > 0.0 && self.lr_late > 0.0 && self.lr.is_finite() && self.lr_late.is_finite()) {
            return fail("learning rates must be positive and finite".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail("weight_decay must be finite and non-negative".into());
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return fail("init_scale must be finite and non-negative".into());
        }
        self.schedule.validate()
    }

    /// Plain MIL training with the same optimizer settings.
    pub fn mil_baseline(&self) -> TrainConfig {
        TrainConfig {
            objective: Objective::Mil,
            ..self.clone()
        }
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if epoch < self.epochs.div_ceil(2) {
            self.lr
        } else {
            self.lr_late
        }
    }

    /// Continuation parameters for a given schedule value.
    pub fn loss_settings(&self, lambda: f64) -> LossSettings {
        let pin = |on: bool| if on { lambda } else { 1.0 };
        LossSettings {
            selector_lambda: pin(self.continuation_selector),
            detector_lambda: pin(self.continuation_detector),
            reduction: self.reduction,
        }
    }

    /// Schedule value for `step` of `steps` bags in `epoch`.
    pub fn lambda_for(&self, epoch: usize, step: usize, steps: usize) -> Result<f64> {
        if self.per_iteration_lambda {
            let total = self.epochs * steps;
            let t = (epoch * steps + step) as f64 / (total.max(2) - 1) as f64;
            Ok(self.schedule.lambda_at(t.min(1.0)))
        } else {
            self.schedule.epoch_lambda(epoch, self.epochs)
        }
    }
}

/// One SGD step on a single bag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    /// Index of the bag in the dataset.
    pub bag: usize,
    pub lambda: f64,
    pub loss: f64,
    pub selection: f64,
    pub detector: f64,
}

/// Summary of one completed epoch. Metrics are measured on the training
/// bags with the parameters at the end of the epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Schedule value of the epoch (of its first step when `lambda` advances per bag).
    pub lambda: f64,
    pub lr: f64,
    pub mean_loss: f64,
    pub mean_selection: f64,
    pub mean_detector: f64,
    /// Fraction of (bag, class) labels predicted correctly by the sign of the
    /// top selector score.
    pub accuracy: f64,
    pub corloc: f64,
    pub map: f64,
    pub median_subset: f64,
    pub mean_subset: f64,
    /// Size of the selected subset for every (positive bag, positive class)
    /// pair, in visiting order.
    pub subset_sizes: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

/// Column order of [`TrainLog::to_csv`].
pub const LOG_COLUMNS: [&str; 12] = [
    "epoch",
    "lambda",
    "lr",
    "mean_loss",
    "mean_selection",
    "mean_detector",
    "accuracy",
    "corloc",
    "map",
    "median_subset",
    "mean_subset",
    "pairs",
];

impl TrainLog {
    /// Comma-separated table, one row per epoch. Floats use round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut out = LOG_COLUMNS.join(",");
        out.push('\n');
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{}",
                r.epoch,
                r.lambda,
                r.lr,
                r.mean_loss,
                r.mean_selection,
                r.mean_detector,
                r.accuracy,
                r.corloc,
                r.map,
                r.median_subset,
                r.mean_subset,
                r.subset_sizes.len()
            );
        }
        out
    }

    /// Per-step losses as a comma-separated table.
    pub fn steps_csv(&self) -> String {
        let mut out = String::from("epoch,bag,lambda,loss,selection,detector\n");
        for s in &self.steps {
            let _ = writeln!(
                out,
                "{},{},{:?},{:?},{:?},{:?}",
                s.epoch, s.bag, s.lambda, s.loss, s.selection, s.detector
            );
        }
        out
    }

    /// Median selected-subset size of every epoch.
    pub fn median_subsets(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.median_subset).collect()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Median of a list; 0 when empty.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Architecture implied by a dataset and the configured hidden width.
pub fn architecture_for(dataset: &[Bag], hidden: usize) -> Result<Architecture> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::Precondition("training set is empty".into()))?;
    let dim = first
        .instances
        .first()
        .map(|i| i.features.len())
        .ok_or_else(|| Error::Precondition(format!("bag `{}` has no instances", first.id)))?;
    let arch = Architecture {
        classes: first.num_classes(),
        dim,
        hidden,
    };
    arch.validate()?;
    for bag in dataset {
        bag.validate(arch.classes, arch.dim)?;
    }
    Ok(arch)
}

/// Initial parameters for a run; drawn from stream 0 of the run seed.
pub fn initial_params(arch: Architecture, config: &TrainConfig) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    ModelParams::random(arch, config.init_scale, &mut rng)
}

/// Trains from the seeded initialisation.
pub fn train(dataset: &[Bag], config: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    train_with(dataset, config, |_, _| Ok(()))
}

/// Trains and calls `on_epoch(epoch, params)` after every epoch.
pub fn train_with<F>(
    dataset: &[Bag],
    config: &TrainConfig,
    on_epoch: F,
) -> Result<(ModelParams, TrainLog)>
where
    F: FnMut(usize, &ModelParams) -> Result<()>,
{
    train_monitored(dataset, config, &EvalConfig::default(), on_epoch)
}

/// Like [`train_with`], with the per-epoch training-set metrics computed
/// under `eval_config`.
pub fn train_monitored<F>(
    dataset: &[Bag],
    config: &TrainConfig,
    eval_config: &EvalConfig,
    mut on_epoch: F,
) -> Result<(ModelParams, TrainLog)>
where
    F: FnMut(usize, &ModelParams) -> Result<()>,
{
    config.validate()?;
    let arch = architecture_for(dataset, config.hidden)?;
    let mut params = initial_params(arch, config);
    let mut velocity = vec![0.0; arch.param_count()];
    let mut grad = GradientBuffer::zeros(arch);
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    order_rng.set_stream(1);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = TrainLog::default();

    for epoch in 0..config.epochs {
        order.shuffle(&mut order_rng);
        let lr = config.learning_rate(epoch);
        let (mut sel_sum, mut det_sum) = (0.0, 0.0);
        let mut sizes = Vec::new();
        let mut epoch_lambda = None;
        for (step, &b) in order.iter().enumerate() {
            let bag = &dataset[b];
            let lambda = config.lambda_for(epoch, step, dataset.len())?;
            epoch_lambda.get_or_insert(lambda);
            grad.clear();
            let (selection, detector) = match config.objective {
                Objective::Continuation => {
                    let settings = config.loss_settings(lambda);
                    let out = total_loss_with(bag, &params, &settings, Some(&mut grad))?;
                    for c in out.classes.iter().filter(|c| c.label.is_positive()) {
                        sizes.push(c.selected.len());
                    }
                    (out.selection, out.detector)
                }
                Objective::Mil => {
                    let (_, classes) = mil_objective(bag, &params, config.reduction, Some(&mut grad))?;
                    let mut s = (0.0, 0.0);
                    for (c, label) in classes.iter().zip(&bag.labels) {
                        s.0 += c.selection_loss;
                        s.1 += c.detector_loss;
                        if label.is_positive() {
                            sizes.push(1);
                        }
                    }
                    s
                }
            };
            let loss = selection + detector;
            if !loss.is_finite() || !grad.is_finite() {
                return Err(Error::NonFiniteLoss {
                    bag: bag.id.clone(),
                    epoch,
                });
            }
            sgd_step(&mut params, &mut velocity, &grad, lr, config);
            sel_sum += selection;
            det_sum += detector;
            log.steps.push(StepRecord {
                epoch,
                bag: b,
                lambda,
                loss,
                selection,
                detector,
            });
        }
        let n = dataset.len() as f64;
        let report = evaluate(dataset, &params, eval_config);
        let size_f: Vec<f64> = sizes.iter().map(|&s| s as f64).collect();
        log.epochs.push(EpochRecord {
            epoch,
            lambda: epoch_lambda.unwrap_or(0.0),
            lr,
            mean_loss: (sel_sum + det_sum) / n,
            mean_selection: sel_sum / n,
            mean_detector: det_sum / n,
            accuracy: bag_accuracy(dataset, &params),
            corloc: report.mean_corloc,
            map: report.map,
            median_subset: median(&size_f),
            mean_subset: if sizes.is_empty() {
                0.0
            } else {
                size_f.iter().sum::<f64>() / size_f.len() as f64
            },
            subset_sizes: sizes,
        });
        log::debug!(
            "epoch {epoch}: lambda {:.4} loss {:.5} corloc {:.3}",
            log.epochs[epoch].lambda,
            log.epochs[epoch].mean_loss,
            report.mean_corloc
        );
        on_epoch(epoch, &params)?;
    }
    Ok((params, log))
}

/// `v <- mu v - lr (g + wd w)`, `w <- w + v`.
pub fn sgd_step(
    params: &mut ModelParams,
    velocity: &mut [f64],
    grad: &GradientBuffer,
    lr: f64,
    config: &TrainConfig,
) {
    let (mu, wd) = (config.momentum, config.weight_decay);
    for ((w, v), g) in params
        .values_mut()
        .iter_mut()
        .zip(velocity.iter_mut())
        .zip(grad.values())
    {
        *v = mu * *v - lr * (g + wd * *w);
        *w += *v;
    }
}

/// Fraction of (bag, class) labels whose sign matches the top selector score.
pub fn bag_accuracy(bags: &[Bag], params: &ModelParams) -> f64 {
    let (hits, total) = bags
        .par_iter()
        .map(|bag| {
            let top = bag
                .instances
                .iter()
                .map(|i| params.selector_scores(&i.features))
                .fold(vec![f64::NEG_INFINITY; bag.num_classes()], |acc, s| {
                    acc.iter().zip(&s).map(|(a, b)| a.max(*b)).collect()
                });
            let hits = top
                .iter()
                .zip(&bag.labels)
                .filter(|(s, l)| (**s > 0.0) == l.is_positive())
                .count();
            (hits, bag.num_classes())
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Finite-difference step of the gradient checker.
pub const GRADCHECK_STEP: f64 = 1e-5;
/// Hinge margins within this distance of 1 are treated as kinks.
pub const KINK_WINDOW: f64 = 1e-3;
/// Denominator floor of the relative error.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub checked: usize,
    /// Coordinates skipped because a hinge margin sits within the kink window.
    pub skipped_kink: usize,
    /// Coordinates skipped because the perturbation changed the selected
    /// subset, anchor, labels or hinge activity.
    pub skipped_structure: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(bag, coordinate)` of the largest relative error.
    pub worst: Option<(String, usize)>,
}

impl GradientReport {
    fn merge(mut self, other: GradientReport) -> GradientReport {
        self.checked += other.checked;
        self.skipped_kink += other.skipped_kink;
        self.skipped_structure += other.skipped_structure;
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        if (other.max_rel_error > self.max_rel_error || self.worst.is_none()) && other.worst.is_some() {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            self.worst = other.worst;
        }
        self
    }

    fn empty() -> Self {
        GradientReport {
            checked: 0,
            skipped_kink: 0,
            skipped_structure: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst: None,
        }
    }
}

/// Discrete choices that the backward pass treats as constants.
fn structure_key(bag: &Bag, params: &ModelParams, settings: &LossSettings) -> Result<Vec<i64>> {
    let out = total_loss_with(bag, params, settings, None)?;
    let mut key = Vec::new();
    for c in &out.classes {
        key.push(i64::from(c.selection_loss > 0.0));
        key.extend(c.selected.iter().map(|&j| j as i64));
        key.push(-1);
        key.push(c.anchor.map_or(-2, |a| a as i64));
        if let Some(a) = &c.assignment {
            key.extend(a.labels.iter().map(|l| *l as i64));
        }
        key.push(-3);
    }
    Ok(key)
}

fn near_kink(bag: &Bag, params: &ModelParams, settings: &LossSettings) -> Result<bool> {
    let out = total_loss_with(bag, params, settings, None)?;
    Ok(out
        .classes
        .iter()
        .any(|c| (c.label.sign() * c.subset_score - 1.0).abs() < KINK_WINDOW))
}

/// Compares the analytic gradient of the continuation loss with central
/// differences on `coords_per_bag` randomly chosen coordinates of each bag.
pub fn check_gradients(
    bags: &[Bag],
    params: &ModelParams,
    settings: &LossSettings,
    coords_per_bag: usize,
    seed: u64,
) -> Result<GradientReport> {
    let reports: Vec<GradientReport> = bags
        .par_iter()
        .enumerate()
        .map(|(i, bag)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            check_bag(bag, params, settings, coords_per_bag, &mut rng)
        })
        .collect::<Result<_>>()?;
    Ok(reports
        .into_iter()
        .fold(GradientReport::empty(), GradientReport::merge))
}

fn check_bag(
    bag: &Bag,
    params: &ModelParams,
    settings: &LossSettings,
    coords: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GradientReport> {
    let mut report = GradientReport::empty();
    let n = params.values().len();
    if near_kink(bag, params, settings)? {
        report.skipped_kink = coords;
        return Ok(report);
    }
    let mut grad = params.gradient_buffer();
    total_loss_with(bag, params, settings, Some(&mut grad))?;
    let base_key = structure_key(bag, params, settings)?;
    let mut probe = params.clone();
    for _ in 0..coords {
        let k = rng.random_range(0..n);
        let w = params.values()[k];
        let mut eval_at = |v: f64| -> Result<(f64, Vec<i64>)> {
            probe.values_mut()[k] = v;
            let loss = total_loss_with(bag, &probe, settings, None)?.loss;
            Ok((loss, structure_key(bag, &probe, settings)?))
        };
        let (plus, key_p) = eval_at(w + GRADCHECK_STEP)?;
        let (minus, key_m) = eval_at(w - GRADCHECK_STEP)?;
        probe.values_mut()[k] = w;
        if key_p != base_key || key_m != base_key {
            report.skipped_structure += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * GRADCHECK_STEP);
        let analytic = grad.values()[k];
        let abs = (numeric - analytic).abs();
        let rel = abs / numeric.abs().max(analytic.abs()).max(GRADCHECK_FLOOR);
        report.checked += 1;
        report.max_abs_error = report.max_abs_error.max(abs);
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((bag.id.clone(), k));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::model::{Instance, Label};
    use crate::synthdata::{generate, SynthConfig};

    fn small_set(n: usize, seed: u64) -> Vec<Bag> {
        generate(&SynthConfig {
            num_bags: n,
            seed,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn learning_rate_halves() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.learning_rate(0), 5e-3);
        assert_eq!(cfg.learning_rate(9), 5e-3);
        assert_eq!(cfg.learning_rate(10), 5e-4);
        let odd = TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        };
        assert_eq!(odd.learning_rate(2), 5e-3);
        assert_eq!(odd.learning_rate(3), 5e-4);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { epochs: 1, ..TrainConfig::default() },
            TrainConfig { lr: 0.0, ..TrainConfig::default() },
            TrainConfig { momentum: 1.0, ..TrainConfig::default() },
        ] {
            assert!(bad.validate().unwrap_err().is_config());
        }
    }

    #[test]
    fn log_lambda_matches_schedule() {
        let bags = small_set(6, 1);
        let cfg = TrainConfig { epochs: 4, ..TrainConfig::default() };
        let (_, log) = train(&bags, &cfg).unwrap();
        assert_eq!(log.epochs.len(), 4);
        assert_eq!(log.steps.len(), 24);
        for r in &log.epochs {
            assert_eq!(r.lambda, cfg.schedule.epoch_lambda(r.epoch, 4).unwrap());
        }
    }

    #[test]
    fn single_negative_bag_hinge_decreases() {
        let bag = Bag {
            id: "neg".into(),
            labels: vec![Label::Negative],
            ground_truth: vec![],
            instances: (0..4)
                .map(|i| Instance {
                    bbox: BBox::new(0.1 * i as f64, 0.0, 0.1 * i as f64 + 0.2, 0.2).unwrap(),
                    features: vec![1.0, 0.5 * i as f64],
                })
                .collect(),
        };
        let cfg = TrainConfig {
            epochs: 5,
            init_scale: 0.0,
            ..TrainConfig::default()
        };
        let (_, log) = train(&[bag], &cfg).unwrap();
        let sel: Vec<f64> = log.epochs.iter().map(|e| e.mean_selection).collect();
        assert!(sel.windows(2).all(|w| w[1] < w[0]), "{sel:?}");
    }

    #[test]
    fn weight_decay_shrinks_norm_without_data_gradient() {
        let arch = Architecture::linear(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ModelParams::random(arch, 1.0, &mut rng);
        let mut velocity = vec![0.0; arch.param_count()];
        let grad = GradientBuffer::zeros(arch);
        let cfg = TrainConfig::default();
        let mut last = params.norm();
        for _ in 0..50 {
            sgd_step(&mut params, &mut velocity, &grad, 5e-3, &cfg);
            let n = params.norm();
            assert!(n < last);
            last = n;
        }
    }

    #[test]
    fn momentum_update_matches_hand_computation() {
        let arch = Architecture::linear(1, 1);
        let mut params = ModelParams::from_values(arch, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let mut grad = GradientBuffer::zeros(arch);
        grad.values_mut()[0] = 2.0;
        let mut v = vec![0.0; 6];
        let cfg = TrainConfig::default();
        sgd_step(&mut params, &mut v, &grad, 0.1, &cfg);
        // v = -0.1 * (2 + 5e-4)
        let v1 = -0.1 * (2.0 + 5e-4);
        assert!((params.values()[0] - (1.0 + v1)).abs() < 1e-15);
        sgd_step(&mut params, &mut v, &grad, 0.1, &cfg);
        let w1 = 1.0 + v1;
        let v2 = 0.9 * v1 - 0.1 * (2.0 + 5e-4 * w1);
        assert!((params.values()[0] - (w1 + v2)).abs() < 1e-15);
    }

    #[test]
    fn pinned_training_equals_mil_training() {
        let bags = small_set(12, 2);
        let pinned = TrainConfig {
            epochs: 4,
            continuation_selector: false,
            continuation_detector: false,
            ..TrainConfig::default()
        };
        let (pa, la) = train(&bags, &pinned).unwrap();
        let (pb, lb) = train(&bags, &pinned.mil_baseline()).unwrap();
        for (a, b) in la.steps.iter().zip(&lb.steps) {
            assert!((a.loss - b.loss).abs() <= 1e-12, "{a:?} vs {b:?}");
        }
        for (a, b) in pa.values().iter().zip(pb.values()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let bags = small_set(10, 4);
        let cfg = TrainConfig { epochs: 3, seed: 9, ..TrainConfig::default() };
        let (pa, la) = train(&bags, &cfg).unwrap();
        let (pb, lb) = train(&bags, &cfg).unwrap();
        assert_eq!(la.to_csv(), lb.to_csv());
        assert_eq!(la.steps_csv(), lb.steps_csv());
        assert_eq!(pa, pb);
    }

    #[test]
    fn non_finite_features_abort_with_bag_and_epoch() {
        let mut bags = small_set(3, 5);
        bags[1].instances[0].features[0] = 1e308;
        bags[1].instances[1].features[0] = 1e308;
        let cfg = TrainConfig { epochs: 2, init_scale: 1.0, ..TrainConfig::default() };
        match train(&bags, &cfg) {
            Err(Error::NonFiniteLoss { bag, epoch }) => {
                assert_eq!(bag, bags[1].id);
                assert!(epoch < 2);
            }
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn gradcheck_passes_on_random_params() {
        let bags = small_set(8, 6);
        let arch = architecture_for(&bags, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = ModelParams::random(arch, 0.5, &mut rng);
        for lambda in [0.0, 0.4, 1.0] {
            let r = check_gradients(&bags, &params, &LossSettings::uniform(lambda), 20, 3).unwrap();
            assert!(r.checked > 0);
            assert!(r.max_rel_error < 1e-4, "{r:?}");
        }
    }

    #[test]
    fn gradcheck_zero_loss_is_zero() {
        let bags: Vec<Bag> = small_set(6, 7)
            .into_iter()
            .filter(|b| b.labels.iter().all(|l| !l.is_positive()))
            .collect();
        assert!(!bags.is_empty());
        let arch = architecture_for(&bags, 0).unwrap();
        let mut params = ModelParams::zeros(arch);
        for c in 0..arch.classes {
            *params.selector_bias_mut(c) = -5.0;
        }
        let r = check_gradients(&bags, &params, &LossSettings::uniform(0.5), 10, 0).unwrap();
        assert_eq!(r.max_abs_error, 0.0);
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn gradcheck_skips_exact_kink() {
        let bag = Bag {
            id: "kink".into(),
            labels: vec![Label::Positive],
            ground_truth: vec![],
            instances: vec![Instance {
                bbox: BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
                features: vec![1.0],
            }],
        };
        let mut params = ModelParams::zeros(Architecture::linear(1, 1));
        params.selector_weights_mut(0)[0] = 1.0;
        let r = check_gradients(&[bag], &params, &LossSettings::uniform(0.0), 5, 0).unwrap();
        assert_eq!(r.checked, 0);
        assert_eq!(r.skipped_kink, 5);
    }

    #[test]
    fn subset_sizes_cover_positive_pairs() {
        let bags = small_set(10, 8);
        let pairs: usize = bags
            .iter()
            .map(|b| b.labels.iter().filter(|l| l.is_positive()).count())
            .sum();
        let (_, log) = train(&bags, &TrainConfig { epochs: 2, ..TrainConfig::default() }).unwrap();
        for r in &log.epochs {
            assert_eq!(r.subset_sizes.len(), pairs);
        }
        assert_eq!(log.epochs[0].lambda, 0.0);
        // at lambda = 0 the whole bag is one subset
        assert!(log.epochs[0].subset_sizes.iter().all(|&s| s == 30));
    }

    #[test]
    fn csv_has_one_row_per_epoch() {
        let bags = small_set(5, 9);
        let (_, log) = train(&bags, &TrainConfig { epochs: 2, ..TrainConfig::default() }).unwrap();
        let csv = log.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], LOG_COLUMNS.join(","));
        assert_eq!(lines[1].split(',').count(), LOG_COLUMNS.len());
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
