//! The continuation MIL objective.
//!
//! A bag's instances are grouped into disjoint subsets whose granularity is
//! controlled by the continuation parameter `lambda`: at `lambda = 0` the bag
//! is one subset, at `lambda = 1` every (distinct) instance is its own subset.
//! Instance selection applies a hinge to the best subset mean instead of the
//! best single instance, and detector pseudo-labels are drawn from
//! `lambda`-dependent IoU thresholds around the best instance of the chosen
//! subset. At `lambda = 1` everything reduces to plain MIL, which is also
//! implemented separately in [`mil_objective`] as a baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{descending_order, iou, BBox};
use crate::model::{log_softmax, softmax, Bag, GradientBuffer, Label, ModelParams};

/// Cover of a bag's instances by disjoint subsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetPartition {
    pub lambda: f64,
    /// Member indices of each subset (ascending), in creation order.
    pub subsets: Vec<Vec<usize>>,
    /// Highest-scoring member of each subset.
    pub seeds: Vec<usize>,
}

impl SubsetPartition {
    pub fn len(&self) -> usize {
        self.subsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsets.is_empty()
    }

    /// Mean score of the subset's members.
    pub fn subset_score(&self, subset: usize, scores: &[f64]) -> f64 {
        let members = &self.subsets[subset];
        members.iter().map(|&j| scores[j]).sum::<f64>() / members.len() as f64
    }

    /// Index of the subset with the highest mean score; earlier subsets win ties.
    pub fn best_subset(&self, scores: &[f64]) -> (usize, f64) {
        let mut best = (0, self.subset_score(0, scores));
        for k in 1..self.len() {
            let s = self.subset_score(k, scores);
            if s > best.1 {
                best = (k, s);
            }
        }
        best
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Precondition(format!(
            "lambda must lie in [0, 1], got {lambda}"
        )));
    }
    Ok(())
}

/// Greedy subset construction over explicit boxes and scores.
///
/// Repeatedly seeds a subset with the highest-scoring uncovered instance (lower
/// index on ties) and adds every uncovered instance whose IoU with the seed is
/// at least `lambda`.
pub fn partition_boxes(boxes: &[BBox], scores: &[f64], lambda: f64) -> Result<SubsetPartition> {
    check_lambda(lambda)?;
    if boxes.is_empty() {
        return Err(Error::Precondition("cannot partition an empty bag".into()));
    }
    if scores.len() != boxes.len() {
        return Err(Error::Precondition(format!(
            "{} scores for {} instances",
            scores.len(),
            boxes.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Precondition("instance scores must be finite".into()));
    }
    let mut covered = vec![false; boxes.len()];
    let mut subsets = Vec::new();
    let mut seeds = Vec::new();
    for seed in descending_order(scores.iter().copied()) {
        if covered[seed] {
            continue;
        }
        covered[seed] = true;
        let mut members = vec![seed];
        for j in 0..boxes.len() {
            if !covered[j] && iou(&boxes[seed], &boxes[j]) >= lambda {
                covered[j] = true;
                members.push(j);
            }
        }
        members.sort_unstable();
        subsets.push(members);
        seeds.push(seed);
    }
    Ok(SubsetPartition {
        lambda,
        subsets,
        seeds,
    })
}

/// Partitions a bag's instances given per-instance scores.
pub fn partition_subsets(bag: &Bag, scores: &[f64], lambda: f64) -> Result<SubsetPartition> {
    partition_boxes(&bag.boxes(), scores, lambda)
}

/// Mean member score of one subset.
pub fn subset_score(partition: &SubsetPartition, subset: usize, scores: &[f64]) -> f64 {
    partition.subset_score(subset, scores)
}

pub(crate) fn hinge(label: Label, score: f64) -> f64 {
    (1.0 - label.sign() * score).max(0.0)
}

/// Outcome of the instance-selection term for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub loss: f64,
    /// Index of the selected subset within `partition`.
    pub subset: usize,
    /// Mean score of the selected subset.
    pub score: f64,
    pub partition: SubsetPartition,
}

impl Selection {
    pub fn members(&self) -> &[usize] {
        &self.partition.subsets[self.subset]
    }
}

/// Selection loss on precomputed scores: hinge on the best subset mean.
pub fn select_from_scores(
    boxes: &[BBox],
    scores: &[f64],
    label: Label,
    lambda: f64,
) -> Result<Selection> {
    let partition = partition_boxes(boxes, scores, lambda)?;
    let (subset, score) = partition.best_subset(scores);
    Ok(Selection {
        loss: hinge(label, score),
        subset,
        score,
        partition,
    })
}

fn class_scores(bag: &Bag, params: &ModelParams, class: usize) -> Result<Vec<f64>> {
    bag.instances
        .iter()
        .map(|inst| params.selector_score(inst, class))
        .collect()
}

/// Continuation selection loss of one class on one bag.
pub fn selection_loss(
    bag: &Bag,
    class: usize,
    label: Label,
    params: &ModelParams,
    lambda: f64,
) -> Result<Selection> {
    let scores = class_scores(bag, params, class)?;
    select_from_scores(&bag.boxes(), &scores, label, lambda)
}

/// Plain MIL hinge on the single highest-scoring instance.
/// Returns the loss and the selected instance (lower index on ties).
pub fn mil_selection_loss(
    bag: &Bag,
    class: usize,
    label: Label,
    params: &ModelParams,
) -> Result<(f64, usize)> {
    if bag.is_empty() {
        return Err(Error::Precondition("empty bag".into()));
    }
    let scores = class_scores(bag, params, class)?;
    let top = argmax(&scores);
    Ok((hinge(label, scores[top]), top))
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Detector pseudo-label of one instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstanceLabel {
    Positive,
    Negative,
    Ignore,
}

/// Detector targets for one class of one bag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelAssignment {
    pub class: usize,
    pub anchor: usize,
    pub lambda: f64,
    pub labels: Vec<InstanceLabel>,
}

impl LabelAssignment {
    pub fn count(&self, which: InstanceLabel) -> usize {
        self.labels.iter().filter(|&&l| l == which).count()
    }

    pub fn indices(&self, which: InstanceLabel) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&j| self.labels[j] == which)
            .collect()
    }
}

/// Labels instances by IoU with the anchor: positive at `>= 1 - lambda/2`,
/// negative below `lambda/2`, ignored in between.
pub fn assign_labels_boxes(
    boxes: &[BBox],
    anchor: usize,
    lambda: f64,
    class: usize,
) -> Result<LabelAssignment> {
    check_lambda(lambda)?;
    if anchor >= boxes.len() {
        return Err(Error::Precondition(format!(
            "anchor {anchor} out of range for {} instances",
            boxes.len()
        )));
    }
    let pos = 1.0 - lambda / 2.0;
    let neg = lambda / 2.0;
    let labels = boxes
        .iter()
        .map(|b| {
            let o = iou(b, &boxes[anchor]);
            if o >= pos {
                InstanceLabel::Positive
            } else if o < neg {
                InstanceLabel::Negative
            } else {
                InstanceLabel::Ignore
            }
        })
        .collect();
    Ok(LabelAssignment {
        class,
        anchor,
        lambda,
        labels,
    })
}

pub fn assign_labels(
    bag: &Bag,
    anchor: usize,
    lambda: f64,
    class: usize,
) -> Result<LabelAssignment> {
    assign_labels_boxes(&bag.boxes(), anchor, lambda, class)
}

/// How the detector cross-entropy is reduced over labelled instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Reduction::Mean),
            "sum" => Ok(Reduction::Sum),
            other => Err(Error::Config(format!(
                "unknown detector loss reduction `{other}` (expected mean or sum)"
            ))),
        }
    }
}

fn target_channel(label: InstanceLabel, class: usize, background: usize) -> Option<usize> {
    match label {
        InstanceLabel::Positive => Some(class),
        InstanceLabel::Negative => Some(background),
        InstanceLabel::Ignore => None,
    }
}

/// Cross-entropy of the detector against an assignment; ignored instances
/// contribute nothing. Returns 0 when every instance is ignored.
pub fn detector_loss(
    bag: &Bag,
    assignment: &LabelAssignment,
    params: &ModelParams,
    reduction: Reduction,
) -> f64 {
    detector_term(bag, assignment, params, reduction, None)
}

fn detector_term(
    bag: &Bag,
    assignment: &LabelAssignment,
    params: &ModelParams,
    reduction: Reduction,
    mut grad: Option<&mut GradientBuffer>,
) -> f64 {
    let background = params.architecture().background();
    let labelled = assignment.labels.len() - assignment.count(InstanceLabel::Ignore);
    if labelled == 0 {
        log::warn!(
            "bag `{}` class {}: every instance ignored by the detector labels",
            bag.id,
            assignment.class
        );
        return 0.0;
    }
    let scale = match reduction {
        Reduction::Mean => 1.0 / labelled as f64,
        Reduction::Sum => 1.0,
    };
    let mut total = 0.0;
    for (inst, &label) in bag.instances.iter().zip(&assignment.labels) {
        let Some(t) = target_channel(label, assignment.class, background) else {
            continue;
        };
        let logits = params.detector_logits(&inst.features);
        total -= log_softmax(&logits)[t];
        if let Some(buf) = grad.as_deref_mut() {
            let mut g = softmax(&logits);
            g[t] -= 1.0;
            g.iter_mut().for_each(|v| *v *= scale);
            params.detector_backward_logits(inst, &g, buf);
        }
    }
    total * scale
}

/// Which continuation parameter each term uses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSettings {
    /// Partition granularity for instance selection.
    pub selector_lambda: f64,
    /// Threshold parameter for detector pseudo-labels.
    pub detector_lambda: f64,
    pub reduction: Reduction,
}

impl LossSettings {
    pub fn uniform(lambda: f64) -> Self {
        LossSettings {
            selector_lambda: lambda,
            detector_lambda: lambda,
            reduction: Reduction::Mean,
        }
    }
}

/// Per-class breakdown of one bag's loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDiagnostics {
    pub class: usize,
    pub label: Label,
    pub selection_loss: f64,
    /// Members of the selected subset.
    pub selected: Vec<usize>,
    pub subset_score: f64,
    pub num_subsets: usize,
    /// Detector anchor; only for positive classes.
    pub anchor: Option<usize>,
    pub assignment: Option<LabelAssignment>,
    pub detector_loss: f64,
}

/// Loss of one bag with its per-class breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct BagLoss {
    pub loss: f64,
    pub selection: f64,
    pub detector: f64,
    pub classes: Vec<ClassDiagnostics>,
}

/// Total continuation loss of a bag with one `lambda` for both terms.
pub fn total_loss(bag: &Bag, params: &ModelParams, lambda: f64) -> Result<BagLoss> {
    total_loss_with(bag, params, &LossSettings::uniform(lambda), None)
}

/// Total continuation loss; accumulates gradients into `grad` when given.
///
/// Subset membership, the selected subset and detector labels are treated as
/// constants for the backward pass.
pub fn total_loss_with(
    bag: &Bag,
    params: &ModelParams,
    settings: &LossSettings,
    mut grad: Option<&mut GradientBuffer>,
) -> Result<BagLoss> {
    let arch = params.architecture();
    bag.validate(arch.classes, arch.dim)?;
    check_lambda(settings.detector_lambda)?;
    let boxes = bag.boxes();
    let scores: Vec<Vec<f64>> = bag
        .instances
        .iter()
        .map(|i| params.selector_scores(&i.features))
        .collect();
    let mut upstream = vec![vec![0.0; arch.classes]; bag.len()];
    let mut out = BagLoss {
        loss: 0.0,
        selection: 0.0,
        detector: 0.0,
        classes: Vec::with_capacity(arch.classes),
    };
    for (class, &label) in bag.labels.iter().enumerate() {
        let s: Vec<f64> = scores.iter().map(|row| row[class]).collect();
        let sel = select_from_scores(&boxes, &s, label, settings.selector_lambda)?;
        if sel.loss > 0.0 {
            let members = sel.members();
            let g = -label.sign() / members.len() as f64;
            for &j in members {
                upstream[j][class] += g;
            }
        }
        let mut diag = ClassDiagnostics {
            class,
            label,
            selection_loss: sel.loss,
            selected: sel.members().to_vec(),
            subset_score: sel.score,
            num_subsets: sel.partition.len(),
            anchor: None,
            assignment: None,
            detector_loss: 0.0,
        };
        if label.is_positive() {
            let anchor = top_member(sel.members(), &s);
            debug_assert_eq!(anchor, sel.partition.seeds[sel.subset]);
            let assignment =
                assign_labels_boxes(&boxes, anchor, settings.detector_lambda, class)?;
            diag.detector_loss = detector_term(
                bag,
                &assignment,
                params,
                settings.reduction,
                grad.as_deref_mut(),
            );
            diag.anchor = Some(anchor);
            diag.assignment = Some(assignment);
        }
        out.selection += diag.selection_loss;
        out.detector += diag.detector_loss;
        out.classes.push(diag);
    }
    out.loss = out.selection + out.detector;
    if let Some(buf) = grad {
        for (inst, up) in bag.instances.iter().zip(&upstream) {
            if up.iter().any(|&u| u != 0.0) {
                params.selector_backward_all(inst, up, buf);
            }
        }
    }
    Ok(out)
}

/// Highest-scoring member, lower index on ties.
fn top_member(members: &[usize], scores: &[f64]) -> usize {
    let mut best = members[0];
    for &j in &members[1..] {
        if scores[j] > scores[best] || (scores[j] == scores[best] && j < best) {
            best = j;
        }
    }
    best
}

/// Per-class breakdown of the baseline MIL loss.
#[derive(Debug, Clone, PartialEq)]
pub struct MilClass {
    pub selection_loss: f64,
    pub selected: usize,
    pub detector_loss: f64,
}

/// Baseline MIL objective: hinge on the top instance plus detector
/// cross-entropy with labels `+1` at IoU >= 0.5 with the top instance and
/// background otherwise. Written independently of the continuation path.
pub fn mil_objective(
    bag: &Bag,
    params: &ModelParams,
    reduction: Reduction,
    mut grad: Option<&mut GradientBuffer>,
) -> Result<(f64, Vec<MilClass>)> {
    let arch = params.architecture();
    bag.validate(arch.classes, arch.dim)?;
    let background = arch.background();
    let mut total = 0.0;
    let mut per_class = Vec::with_capacity(arch.classes);
    for (class, &label) in bag.labels.iter().enumerate() {
        let (sel_loss, top) = mil_selection_loss(bag, class, label, params)?;
        if sel_loss > 0.0 {
            if let Some(buf) = grad.as_deref_mut() {
                params.selector_backward(&bag.instances[top], class, -label.sign(), buf);
            }
        }
        let mut det_loss = 0.0;
        if label.is_positive() {
            let anchor = bag.instances[top].bbox;
            let n = bag.len() as f64;
            let scale = match reduction {
                Reduction::Mean => 1.0 / n,
                Reduction::Sum => 1.0,
            };
            for inst in &bag.instances {
                let t = if iou(&inst.bbox, &anchor) >= 0.5 {
                    class
                } else {
                    background
                };
                let logits = params.detector_logits(&inst.features);
                det_loss -= log_softmax(&logits)[t];
                if let Some(buf) = grad.as_deref_mut() {
                    let mut g = softmax(&logits);
                    g[t] -= 1.0;
                    g.iter_mut().for_each(|v| *v *= scale);
                    params.detector_backward_logits(inst, &g, buf);
                }
            }
            det_loss *= scale;
        }
        total += sel_loss + det_loss;
        per_class.push(MilClass {
            selection_loss: sel_loss,
            selected: top,
            detector_loss: det_loss,
        });
    }
    Ok((total, per_class))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, Instance};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn bag_from(boxes: &[BBox], labels: Vec<Label>, dim: usize) -> Bag {
        Bag {
            id: "t".into(),
            labels,
            ground_truth: vec![],
            instances: boxes
                .iter()
                .map(|&bbox| Instance {
                    bbox,
                    features: vec![0.0; dim],
                })
                .collect(),
        }
    }

    /// Params whose class-0 selector score equals the first feature.
    fn identity_params(classes: usize, dim: usize) -> ModelParams {
        let mut p = ModelParams::zeros(Architecture::linear(classes, dim));
        p.selector_weights_mut(0)[0] = 1.0;
        p
    }

    fn scored_bag(boxes: &[BBox], scores: &[f64]) -> Bag {
        let mut bag = bag_from(boxes, vec![Label::Positive], 1);
        for (inst, &s) in bag.instances.iter_mut().zip(scores) {
            inst.features[0] = s;
        }
        bag
    }

    fn random_boxes(rng: &mut ChaCha8Rng, n: usize) -> Vec<BBox> {
        (0..n)
            .map(|_| {
                let x = rng.random::<f64>() * 0.7;
                let y = rng.random::<f64>() * 0.7;
                b(x, y, x + 0.05 + rng.random::<f64>() * 0.25, y + 0.05 + rng.random::<f64>() * 0.25)
            })
            .collect()
    }

    #[test]
    fn lambda_zero_gives_one_subset() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let boxes = random_boxes(&mut rng, 12);
        let scores: Vec<f64> = (0..12).map(|_| rng.random()).collect();
        let p = partition_boxes(&boxes, &scores, 0.0).unwrap();
        assert_eq!(p.subsets, vec![(0..12).collect::<Vec<_>>()]);
    }

    #[test]
    fn lambda_one_gives_singletons() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let boxes = random_boxes(&mut rng, 12);
        let scores: Vec<f64> = (0..12).map(|_| rng.random()).collect();
        let p = partition_boxes(&boxes, &scores, 1.0).unwrap();
        assert_eq!(p.len(), 12);
        assert!(p.subsets.iter().all(|s| s.len() == 1));
    }

    #[test]
    fn hand_traced_partition_at_half() {
        // boxes 0,1 overlap with IoU 1/3; 0,2 overlap with IoU 0.6; 3,4 with IoU 0.6
        let boxes = [
            b(0.0, 0.0, 10.0, 10.0),
            b(5.0, 0.0, 15.0, 10.0),
            b(0.0, 0.0, 10.0, 6.0),
            b(20.0, 20.0, 30.0, 30.0),
            b(20.0, 20.0, 30.0, 26.0),
        ];
        let scores = [0.5, 0.9, 0.1, 0.7, 0.8];
        // Step-by-step: seed 1 (0.9): IoU(1,0)=1/3, IoU(1,2)=0.2, IoU(1,3)=IoU(1,4)=0 -> {1}
        // seed 4 (0.8): IoU(4,3)=0.6 -> {3,4}; IoU(4,0)=IoU(4,2)=0
        // seed 0 (0.5): IoU(0,2)=0.6 -> {0,2}
        let p = partition_boxes(&boxes, &scores, 0.5).unwrap();
        assert_eq!(p.subsets, vec![vec![1], vec![3, 4], vec![0, 2]]);
        assert_eq!(p.seeds, vec![1, 4, 0]);
        assert!((p.subset_score(1, &scores) - 0.75).abs() < 1e-15);
        assert_eq!(p.best_subset(&scores).0, 0);
    }

    #[test]
    fn score_ties_seed_lower_index() {
        let boxes = [b(0., 0., 1., 1.), b(2., 2., 3., 3.)];
        let p = partition_boxes(&boxes, &[0.3, 0.3], 0.5).unwrap();
        assert_eq!(p.seeds, vec![0, 1]);
    }

    #[test]
    fn partition_preconditions() {
        assert!(partition_boxes(&[], &[], 0.5).is_err());
        let boxes = [b(0., 0., 1., 1.)];
        assert!(partition_boxes(&boxes, &[0.1], 1.5).is_err());
        assert!(partition_boxes(&boxes, &[f64::NAN], 0.5).is_err());
        assert!(partition_boxes(&boxes, &[0.1, 0.2], 0.5).is_err());
    }

    #[test]
    fn subset_scores_are_means() {
        let boxes = [b(0., 0., 1., 1.), b(0., 0., 1., 1.)];
        let p = partition_boxes(&boxes, &[1.0, 3.0], 0.0).unwrap();
        assert_eq!(subset_score(&p, 0, &[1.0, 3.0]), 2.0);
        let single = partition_boxes(&boxes[..1], &[0.42], 0.3).unwrap();
        assert_eq!(subset_score(&single, 0, &[0.42]), 0.42);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let boxes = random_boxes(&mut rng, 10);
        let scores: Vec<f64> = (0..10).map(|_| rng.random_range(-3.0..3.0)).collect();
        let p = partition_boxes(&boxes, &scores, 0.0).unwrap();
        let mut acc = 0.0;
        for s in &scores {
            acc += s;
        }
        assert!((subset_score(&p, 0, &scores) - acc / 10.0).abs() < 1e-12);
    }

    #[test]
    fn selection_loss_examples() {
        let boxes = [b(0., 0., 1., 1.), b(2., 2., 3., 3.)];
        let p = identity_params(1, 1);

        let bag = scored_bag(&boxes, &[0.2, 0.4]);
        let sel = selection_loss(&bag, 0, Label::Positive, &p, 0.0).unwrap();
        assert!((sel.loss - 0.7).abs() < 1e-12);

        let bag = scored_bag(&boxes, &[1.5, -2.0]);
        let sel = selection_loss(&bag, 0, Label::Positive, &p, 1.0).unwrap();
        assert_eq!(sel.loss, 0.0);
    }

    #[test]
    fn mil_selection_examples() {
        let boxes = [b(0., 0., 1., 1.), b(2., 2., 3., 3.)];
        let p = identity_params(1, 1);
        let bag = scored_bag(&boxes, &[0.0, 0.0]);
        assert_eq!(mil_selection_loss(&bag, 0, Label::Positive, &p).unwrap(), (1.0, 0));
        let bag = scored_bag(&boxes, &[2.0, -1.0]);
        assert_eq!(mil_selection_loss(&bag, 0, Label::Negative, &p).unwrap(), (3.0, 0));
    }

    #[test]
    fn label_thresholds() {
        // anchor 0; box 1 IoU 0.6, box 2 IoU 0.4, box 3 IoU 0.5
        let boxes = [
            b(0., 0., 10., 10.),
            b(0., 0., 10., 6.),
            b(0., 0., 10., 4.),
            b(0., 0., 10., 5.),
        ];
        use InstanceLabel::*;
        let a = assign_labels_boxes(&boxes, 0, 1.0, 0).unwrap();
        assert_eq!(a.labels, vec![Positive, Positive, Negative, Positive]);
        let a = assign_labels_boxes(&boxes, 0, 0.0, 0).unwrap();
        assert_eq!(a.labels, vec![Positive, Ignore, Ignore, Ignore]);
        let a = assign_labels_boxes(&boxes, 0, 0.4, 0).unwrap();
        assert_eq!(a.labels[3], Ignore);
        assert!(assign_labels_boxes(&boxes, 7, 0.4, 0).is_err());
    }

    #[test]
    fn detector_loss_examples() {
        let boxes = [b(0., 0., 1., 1.)];
        let bag = bag_from(&boxes, vec![Label::Positive], 2);
        let mut p = ModelParams::zeros(Architecture::linear(1, 2));
        let a = assign_labels(&bag, 0, 1.0, 0).unwrap();
        let uniform = detector_loss(&bag, &a, &p, Reduction::Mean);
        assert!((uniform - 0.5f64.ln().abs()).abs() < 1e-12);

        *p.detector_bias_mut(0) = 1000.0;
        assert!(detector_loss(&bag, &a, &p, Reduction::Mean).abs() < 1e-12);

        let ignored = LabelAssignment {
            class: 0,
            anchor: 0,
            lambda: 0.0,
            labels: vec![InstanceLabel::Ignore],
        };
        assert_eq!(detector_loss(&bag, &ignored, &p, Reduction::Mean), 0.0);
    }

    #[test]
    fn detector_loss_matches_hand_summed_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let boxes = random_boxes(&mut rng, 5);
        let mut bag = bag_from(&boxes, vec![Label::Positive, Label::Negative], 3);
        for inst in &mut bag.instances {
            inst.features = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        }
        let p = ModelParams::random(Architecture::linear(2, 3), 1.0, &mut rng);
        use InstanceLabel::*;
        let a = LabelAssignment {
            class: 1,
            anchor: 0,
            lambda: 0.5,
            labels: vec![Positive, Negative, Ignore, Positive, Negative],
        };
        let mut terms = Vec::new();
        for (j, label) in a.labels.iter().enumerate() {
            let t = match label {
                Positive => 1,
                Negative => 2,
                Ignore => continue,
            };
            let prob = p.detector_prob(&bag.instances[j]).unwrap();
            terms.push(-prob[t].ln());
        }
        let mean = terms.iter().sum::<f64>() / terms.len() as f64;
        assert!((detector_loss(&bag, &a, &p, Reduction::Mean) - mean).abs() < 1e-12);
        let sum = terms.iter().sum::<f64>();
        assert!((detector_loss(&bag, &a, &p, Reduction::Sum) - sum).abs() < 1e-12);
    }

    #[test]
    fn negative_bag_with_low_scores_has_zero_loss() {
        let boxes = [b(0., 0., 1., 1.), b(2., 2., 3., 3.)];
        let mut bag = scored_bag(&boxes, &[-1.0, -3.0]);
        bag.labels = vec![Label::Negative];
        let p = identity_params(1, 1);
        for lambda in [0.0, 0.5, 1.0] {
            let out = total_loss(&bag, &p, lambda).unwrap();
            assert_eq!(out.loss, 0.0);
            assert!(out.classes[0].assignment.is_none());
        }
    }

    #[test]
    fn total_loss_matches_composed_operations() {
        // fixed bag, lambda = 0.5: compose partition, selection, anchor, labels, detector
        let boxes = [
            b(0.0, 0.0, 10.0, 10.0),
            b(5.0, 0.0, 15.0, 10.0),
            b(0.0, 0.0, 10.0, 6.0),
            b(20.0, 20.0, 30.0, 30.0),
            b(20.0, 20.0, 30.0, 26.0),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut bag = bag_from(&boxes, vec![Label::Positive, Label::Negative], 3);
        for inst in &mut bag.instances {
            inst.features = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        }
        let p = ModelParams::random(Architecture::linear(2, 3), 1.0, &mut rng);
        let out = total_loss(&bag, &p, 0.5).unwrap();

        let mut expected = 0.0;
        for class in 0..2 {
            let label = bag.labels[class];
            let scores: Vec<f64> = bag
                .instances
                .iter()
                .map(|i| p.selector_score(i, class).unwrap())
                .collect();
            let part = partition_subsets(&bag, &scores, 0.5).unwrap();
            let (k, best) = part.best_subset(&scores);
            expected += (1.0 - label.sign() * best).max(0.0);
            if label.is_positive() {
                let anchor = part.seeds[k];
                let a = assign_labels(&bag, anchor, 0.5, class).unwrap();
                expected += detector_loss(&bag, &a, &p, Reduction::Mean);
            }
        }
        assert!((out.loss - expected).abs() < 1e-12);
    }

    #[test]
    fn lambda_one_reduces_to_mil() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let n = rng.random_range(1..20);
            let boxes = random_boxes(&mut rng, n);
            let labels = vec![
                if rng.random() { Label::Positive } else { Label::Negative },
                Label::Positive,
            ];
            let mut bag = bag_from(&boxes, labels, 4);
            for inst in &mut bag.instances {
                inst.features = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            }
            let p = ModelParams::random(Architecture::linear(2, 4), 1.0, &mut rng);
            for class in 0..2 {
                let l = bag.labels[class];
                let sel = selection_loss(&bag, class, l, &p, 1.0).unwrap();
                let (mil, _) = mil_selection_loss(&bag, class, l, &p).unwrap();
                assert!((sel.loss - mil).abs() <= 1e-12);
            }
            let cont = total_loss(&bag, &p, 1.0).unwrap().loss;
            let (base, _) = mil_objective(&bag, &p, Reduction::Mean, None).unwrap();
            assert!((cont - base).abs() <= 1e-12);
        }
    }

    #[test]
    fn gradients_match_between_paths_at_lambda_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let boxes = random_boxes(&mut rng, 9);
        let mut bag = bag_from(&boxes, vec![Label::Positive, Label::Negative], 4);
        for inst in &mut bag.instances {
            inst.features = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        }
        let p = ModelParams::random(Architecture::linear(2, 4), 0.3, &mut rng);
        let mut g1 = p.gradient_buffer();
        let mut g2 = p.gradient_buffer();
        total_loss_with(&bag, &p, &LossSettings::uniform(1.0), Some(&mut g1)).unwrap();
        mil_objective(&bag, &p, Reduction::Mean, Some(&mut g2)).unwrap();
        for (a, c) in g1.values().iter().zip(g2.values()) {
            assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn max_subset_score_grows_as_nested_subsets_split() {
        // nested fixture: {0,1,2} at low lambda, {0,1},{2} in the middle, singletons at 1
        let boxes = [
            b(0.0, 0.0, 10.0, 10.0),
            b(0.0, 0.0, 10.0, 8.0),
            b(0.0, 0.0, 10.0, 3.0),
        ];
        let scores = [2.0, 1.0, -1.0];
        let mut last = f64::NEG_INFINITY;
        for step in 0..=10 {
            let lambda = step as f64 / 10.0;
            let p = partition_boxes(&boxes, &scores, lambda).unwrap();
            let (_, best) = p.best_subset(&scores);
            assert!(best >= last - 1e-15, "lambda {lambda}: {best} < {last}");
            last = best;
        }
        assert_eq!(last, 2.0);
    }

    proptest! {
        #[test]
        fn partition_is_exact_cover(seed in 0u64..5000, n in 1usize..25, lambda in 0.0..=1.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let boxes = random_boxes(&mut rng, n);
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let p = partition_boxes(&boxes, &scores, lambda).unwrap();
            let mut seen = vec![0; n];
            for (k, s) in p.subsets.iter().enumerate() {
                for &j in s {
                    seen[j] += 1;
                    prop_assert!(iou(&boxes[p.seeds[k]], &boxes[j]) >= lambda || j == p.seeds[k]);
                    prop_assert!(scores[j] <= scores[p.seeds[k]]);
                }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
        }

        #[test]
        fn lambda_zero_selection_is_convex_in_scores(
            s1 in proptest::collection::vec(-3.0..3.0f64, 6),
            s2 in proptest::collection::vec(-3.0..3.0f64, 6),
            alpha in 0.0..=1.0f64,
        ) {
            let boxes: Vec<BBox> = (0..6).map(|i| b(i as f64, 0.0, i as f64 + 0.5, 1.0)).collect();
            let f = |s: &[f64]| select_from_scores(&boxes, s, Label::Positive, 0.0).unwrap().loss;
            let mix: Vec<f64> = s1.iter().zip(&s2).map(|(a, c)| alpha * a + (1.0 - alpha) * c).collect();
            prop_assert!(f(&mix) <= alpha * f(&s1) + (1.0 - alpha) * f(&s2) + 1e-9);
        }

        #[test]
        fn mean_hinge_dominates_max_hinge(s in proptest::collection::vec(-3.0..3.0f64, 1..10)) {
            let boxes: Vec<BBox> = (0..s.len()).map(|i| b(i as f64, 0.0, i as f64 + 0.5, 1.0)).collect();
            let smooth = select_from_scores(&boxes, &s, Label::Positive, 0.0).unwrap().loss;
            let sharp = select_from_scores(&boxes, &s, Label::Positive, 1.0).unwrap().loss;
            prop_assert!(smooth >= sharp);
        }

        #[test]
        fn total_loss_is_permutation_invariant(seed in 0u64..2000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(2..12);
            let boxes = random_boxes(&mut rng, n);
            let mut bag = bag_from(&boxes, vec![Label::Positive, Label::Negative], 3);
            for inst in &mut bag.instances {
                inst.features = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            }
            let p = ModelParams::random(Architecture::linear(2, 3), 1.0, &mut rng);
            let lambda = rng.random::<f64>();
            let before = total_loss(&bag, &p, lambda).unwrap().loss;
            let mut perm: Vec<usize> = (0..n).collect();
            perm.reverse();
            perm.rotate_left(seed as usize % n);
            let mut shuffled = bag.clone();
            shuffled.instances = perm.iter().map(|&i| bag.instances[i].clone()).collect();
            let after = total_loss(&shuffled, &p, lambda).unwrap().loss;
            prop_assert!((before - after).abs() < 1e-9);
        }
    }
}
