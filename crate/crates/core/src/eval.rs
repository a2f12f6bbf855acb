//! Detection inference and localization metrics (CorLoc, AP, mAP).

use std::collections::HashMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{descending_order, iou, nms, BBox};
use crate::model::{softmax, Bag, ModelParams};

/// NMS threshold used when none is configured.
pub const DEFAULT_NMS_THRESHOLD: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bag: String,
    pub class: usize,
    /// Index of the source instance within its bag.
    pub instance: usize,
    pub bbox: BBox,
    pub confidence: f64,
}

/// How the precision/recall curve is integrated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApMode {
    /// Area under the monotone precision envelope.
    #[default]
    AllPoints,
    /// Mean envelope precision at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub nms_threshold: f64,
    pub iou_threshold: f64,
    pub ap_mode: ApMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            nms_threshold: DEFAULT_NMS_THRESHOLD,
            iou_threshold: 0.5,
            ap_mode: ApMode::AllPoints,
        }
    }
}

fn detector_probs(bag: &Bag, params: &ModelParams) -> Vec<Vec<f64>> {
    bag.instances
        .iter()
        .map(|i| softmax(&params.detector_logits(&i.features)))
        .collect()
}

/// Scores every instance with the detector and applies per-class NMS.
pub fn detect(bag: &Bag, params: &ModelParams, nms_threshold: f64) -> Vec<Detection> {
    let probs = detector_probs(bag, params);
    let mut out = Vec::new();
    for class in 0..params.architecture().classes {
        let scored: Vec<(BBox, f64)> = bag
            .instances
            .iter()
            .zip(&probs)
            .map(|(inst, p)| (inst.bbox, p[class]))
            .collect();
        for j in nms(&scored, nms_threshold) {
            out.push(Detection {
                bag: bag.id.clone(),
                class,
                instance: j,
                bbox: scored[j].0,
                confidence: scored[j].1,
            });
        }
    }
    out
}

/// Instance with the highest detector confidence for `class` (lower index on ties).
pub fn top_instance(bag: &Bag, params: &ModelParams, class: usize) -> usize {
    let conf: Vec<f64> = detector_probs(bag, params).iter().map(|p| p[class]).collect();
    descending_order(conf.into_iter())[0]
}

/// Whether a bag's top instance for `class` hits one of its ground-truth boxes.
pub fn localizes(bag: &Bag, top: usize, class: usize) -> bool {
    let b = bag.instances[top].bbox;
    bag.ground_truth_for(class).any(|g| iou(&b, g) >= 0.5)
}

/// Per-class CorLoc over the positive bags of each class; `None` for classes
/// without positive bags.
pub fn corloc(bags: &[Bag], params: &ModelParams) -> Vec<Option<f64>> {
    let classes = params.architecture().classes;
    let hits: Vec<(usize, usize)> = (0..classes)
        .map(|class| {
            bags.par_iter()
                .filter(|b| b.labels[class].is_positive())
                .map(|b| (usize::from(localizes(b, top_instance(b, params, class), class)), 1))
                .reduce(|| (0, 0), |a, c| (a.0 + c.0, a.1 + c.1))
        })
        .collect();
    hits.into_iter()
        .map(|(h, n)| (n > 0).then(|| h as f64 / n as f64))
        .collect()
}

/// Average precision of one class's detections against its ground truth.
///
/// Detections are ranked by confidence (input order on ties) and greedily
/// matched to the highest-IoU ground truth in the same bag; each ground truth
/// matches at most once. Returns `None` when there is no ground truth.
pub fn average_precision(
    detections: &[Detection],
    ground_truth: &[(String, BBox)],
    iou_threshold: f64,
    mode: ApMode,
) -> Option<f64> {
    if ground_truth.is_empty() {
        return None;
    }
    let mut by_bag: HashMap<&str, Vec<(BBox, bool)>> = HashMap::new();
    for (bag, b) in ground_truth {
        by_bag.entry(bag.as_str()).or_default().push((*b, false));
    }
    let order = descending_order(detections.iter().map(|d| d.confidence));
    let mut tp = Vec::with_capacity(order.len());
    for i in order {
        let d = &detections[i];
        let hit = by_bag.get_mut(d.bag.as_str()).is_some_and(|gts| {
            let mut best: Option<(usize, f64)> = None;
            for (k, (g, _)) in gts.iter().enumerate() {
                let o = iou(&d.bbox, g);
                if best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((k, o));
                }
            }
            match best {
                Some((k, o)) if o >= iou_threshold && !gts[k].1 => {
                    gts[k].1 = true;
                    true
                }
                _ => false,
            }
        });
        tp.push(hit);
    }
    let total = ground_truth.len() as f64;
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (rank, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        recall.push(hits as f64 / total);
        precision.push(hits as f64 / (rank + 1) as f64);
    }
    Some(integrate_pr(&recall, &precision, mode))
}

fn integrate_pr(recall: &[f64], precision: &[f64], mode: ApMode) -> f64 {
    // precision envelope: best precision at any equal-or-higher recall
    let mut envelope = precision.to_vec();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    match mode {
        ApMode::AllPoints => {
            let mut ap = 0.0;
            let mut prev = 0.0;
            for (r, p) in recall.iter().zip(&envelope) {
                if *r > prev {
                    ap += (r - prev) * p;
                    prev = *r;
                }
            }
            ap
        }
        ApMode::ElevenPoint => {
            (0..=10)
                .map(|i| {
                    let t = i as f64 / 10.0;
                    recall
                        .iter()
                        .zip(&envelope)
                        .filter(|(r, _)| **r >= t - 1e-12)
                        .map(|(_, p)| *p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

/// Per-class and mean localization metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ap: Vec<Option<f64>>,
    pub map: f64,
    pub corloc: Vec<Option<f64>>,
    pub mean_corloc: f64,
    pub bags: usize,
    /// Positive bags per class.
    pub positive_bags: Vec<usize>,
    pub nms_threshold: f64,
    pub ap_mode: ApMode,
}

fn mean_present(values: &[Option<f64>]) -> f64 {
    let mut present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        return 0.0;
    }
    // sorted summation keeps the reduction independent of class order
    present.sort_by(f64::total_cmp);
    present.iter().sum::<f64>() / present.len() as f64
}

/// Runs detection on every bag and computes AP, mAP and CorLoc.
pub fn evaluate(bags: &[Bag], params: &ModelParams, config: &EvalConfig) -> MetricReport {
    let classes = params.architecture().classes;
    let detections: Vec<Vec<Detection>> = bags
        .par_iter()
        .map(|b| detect(b, params, config.nms_threshold))
        .collect();
    let ap = (0..classes)
        .map(|class| {
            let dets: Vec<Detection> = detections
                .iter()
                .flatten()
                .filter(|d| d.class == class)
                .cloned()
                .collect();
            let gts: Vec<(String, BBox)> = bags
                .iter()
                .flat_map(|b| b.ground_truth_for(class).map(|g| (b.id.clone(), *g)))
                .collect();
            average_precision(&dets, &gts, config.iou_threshold, config.ap_mode)
        })
        .collect::<Vec<_>>();
    let corloc = corloc(bags, params);
    MetricReport {
        map: mean_present(&ap),
        mean_corloc: mean_present(&corloc),
        ap,
        corloc,
        bags: bags.len(),
        positive_bags: (0..classes)
            .map(|c| bags.iter().filter(|b| b.labels[c].is_positive()).count())
            .collect(),
        nms_threshold: config.nms_threshold,
        ap_mode: config.ap_mode,
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cell = |v: Option<f64>| v.map_or("absent".to_string(), |x| format!("{:.2}", 100.0 * x));
        writeln!(f, "{:<8} {:>8} {:>8} {:>10}", "class", "AP", "CorLoc", "positives")?;
        for c in 0..self.ap.len() {
            writeln!(
                f,
                "{:<8} {:>8} {:>8} {:>10}",
                c,
                cell(self.ap[c]),
                cell(self.corloc[c]),
                self.positive_bags[c]
            )?;
        }
        writeln!(
            f,
            "{:<8} {:>8.2} {:>8.2} {:>10}",
            "mean",
            100.0 * self.map,
            100.0 * self.mean_corloc,
            self.bags
        )?;
        write!(f, "(NMS threshold {}, {} bags)", self.nms_threshold, self.bags)
    }
}
