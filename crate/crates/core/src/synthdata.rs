//! Synthetic bags in which an object part is more discriminative than the
//! object's full extent.
//!
//! Every positive bag holds one object of one class inside the unit square,
//! plus a smaller "part" box inside the object. Proposals are drawn from four
//! families (full-extent jitters, part jitters, partial overlaps, background)
//! and their features are
//!
//! ```text
//! x = beta_part * IoU(p, part) * u_part[c]
//!   + beta_obj  * IoU(p, object) * u_obj[c]
//!   + beta_class * coverage(p) * v[c]
//!   + N(0, noise^2 I)
//! ```
//!
//! where `coverage(p)` is the fraction of the object's area inside `p`.
//! `u_part[c]`, `u_obj[c]` and `e[c]` are orthonormal directions drawn from
//! `basis_seed`, together with one direction `s` shared by all classes, and
//! `v[c] = sqrt(1 - rho^2) e[c] + rho s` with `rho = objectness`. The shared
//! component makes an object's full extent look partly like every other
//! class, so the part is the most discriminative cue. Object-free bags carry
//! background proposals only.
//!
//! Bag `i` draws from a ChaCha8 stream `i` keyed by `seed`, so bags can be
//! generated in parallel and any subset regenerated independently.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::model::{Bag, GroundTruth, Instance, Label};

/// Fractions of each proposal family in a positive bag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalMix {
    pub full: f64,
    pub part: f64,
    pub partial: f64,
    pub background: f64,
}

impl Default for ProposalMix {
    fn default() -> Self {
        ProposalMix {
            full: 0.2,
            part: 0.3,
            partial: 0.2,
            background: 0.3,
        }
    }
}

impl ProposalMix {
    /// Proposal counts per family for a bag of `n`, largest remainders first.
    pub fn counts(&self, n: usize) -> [usize; 4] {
        let w = [self.full, self.part, self.partial, self.background];
        let total: f64 = w.iter().sum();
        let exact: Vec<f64> = w.iter().map(|x| x / total * n as f64).collect();
        let mut counts = [0usize; 4];
        for k in 0..4 {
            counts[k] = exact[k].floor() as usize;
        }
        let mut rest: Vec<usize> = (0..4).collect();
        rest.sort_by(|&a, &b| {
            (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor()))
        });
        let assigned: usize = counts.iter().sum();
        for &k in rest.iter().take(n - assigned) {
            counts[k] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_bags: usize,
    pub proposals_per_bag: usize,
    pub classes: usize,
    pub dim: usize,
    pub beta_part: f64,
    pub beta_obj: f64,
    pub beta_class: f64,
    pub noise: f64,
    /// Fraction of bags that contain an object.
    pub positive_fraction: f64,
    pub seed: u64,
    /// Seed of the class directions; shared by train and test splits.
    pub basis_seed: u64,
    /// Smallest allowed proposal side length.
    pub min_side: f64,
    pub mix: ProposalMix,
    /// Object side length range.
    pub object_size: (f64, f64),
    /// Part side length as a fraction of the object side.
    pub part_fraction: (f64, f64),
    /// Share of partial overlaps drawn as context boxes that enclose the
    /// object; the rest are truncated jitters of the object.
    pub context_fraction: f64,
    /// Weight `rho` of the class-shared component of the class direction.
    pub objectness: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_bags: 200,
            proposals_per_bag: 30,
            classes: 3,
            dim: 16,
            beta_part: 2.0,
            beta_obj: 1.0,
            beta_class: 2.4,
            noise: 0.1,
            positive_fraction: 0.8,
            seed: 0,
            basis_seed: 7,
            min_side: 0.02,
            mix: ProposalMix::default(),
            object_size: (0.35, 0.6),
            part_fraction: (0.3, 0.45),
            context_fraction: 0.0,
            objectness: 0.8,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_bags == 0 || self.proposals_per_bag == 0 || self.classes == 0 {
            return fail("num_bags, proposals_per_bag and classes must be positive");
        }
        if self.dim < 3 * self.classes + 1 {
            return fail("dim must be at least 3 * classes + 1 to hold the class directions");
        }
        if !(0.0..1.0).contains(&self.objectness) {
            return fail("objectness must lie in [0, 1)");
        }
        if !(self.beta_part > self.beta_obj && self.beta_obj >= 0.0 && self.beta_class >= 0.0) {
            return fail("need beta_part > beta_obj >= 0 and beta_class >= 0");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail("noise must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return fail("positive_fraction must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.context_fraction) {
            return fail("context_fraction must lie in [0, 1]");
        }
        let m = self.mix;
        if [m.full, m.part, m.partial, m.background].iter().any(|&x| x < 0.0)
            || m.full + m.part + m.partial + m.background <= 0.0
        {
            return fail("proposal mix weights must be non-negative with a positive sum");
        }
        let (lo, hi) = self.object_size;
        if !(self.min_side > 0.0 && lo >= self.min_side && lo <= hi && hi < 1.0) {
            return fail("object_size must satisfy min_side <= lo <= hi < 1");
        }
        let (plo, phi) = self.part_fraction;
        if !(plo > 0.0 && plo <= phi && phi < 1.0 && plo * lo >= self.min_side) {
            return fail("part_fraction must satisfy 0 < lo <= hi < 1 with parts above min_side");
        }
        Ok(())
    }

    /// Same world (basis, geometry, noise) with a different seed and size.
    pub fn split(&self, seed: u64, num_bags: usize) -> SynthConfig {
        SynthConfig {
            seed,
            num_bags,
            ..self.clone()
        }
    }
}

/// Orthonormal directions for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassBasis {
    pub part: Vec<f64>,
    pub object: Vec<f64>,
    pub class: Vec<f64>,
}

/// Gram-Schmidt over Gaussian draws: `3 * classes + 1` orthonormal vectors,
/// the last one shared by every class direction.
pub fn class_bases(config: &SynthConfig) -> Vec<ClassBasis> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.basis_seed);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(3 * config.classes + 1);
    while basis.len() < 3 * config.classes + 1 {
        let mut v: Vec<f64> = (0..config.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        for u in &basis {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|a| *a /= n);
            basis.push(v);
        }
    }
    let shared = basis.pop().expect("non-empty basis");
    let rho = config.objectness;
    let own = (1.0 - rho * rho).sqrt();
    basis
        .chunks(3)
        .map(|c| ClassBasis {
            part: c[0].clone(),
            object: c[1].clone(),
            class: c[2].iter().zip(&shared).map(|(e, s)| own * e + rho * s).collect(),
        })
        .collect()
}

/// Where a proposal came from; returned alongside generated bags for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProposalKind {
    Full,
    Part,
    Partial,
    Background,
}

/// Object and part boxes of a positive bag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectLayout {
    pub class: usize,
    pub object: BBox,
    pub part: BBox,
}

/// A generated bag with the hidden geometry that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedBag {
    pub bag: Bag,
    pub layout: Option<ObjectLayout>,
    pub kinds: Vec<ProposalKind>,
}

/// Generates `num_bags` bags.
pub fn generate(config: &SynthConfig) -> Result<Vec<Bag>> {
    Ok(generate_detailed(config)?.into_iter().map(|g| g.bag).collect())
}

/// Generates bags together with their object layouts and proposal families.
pub fn generate_detailed(config: &SynthConfig) -> Result<Vec<GeneratedBag>> {
    config.validate()?;
    let bases = class_bases(config);
    (0..config.num_bags)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64);
            generate_bag(config, &bases, i, &mut rng)
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn generate_bag(
    config: &SynthConfig,
    bases: &[ClassBasis],
    index: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GeneratedBag> {
    let id = format!("s{}-{index:05}", config.seed);
    let n = config.proposals_per_bag;
    let positive = rng.random::<f64>() < config.positive_fraction;
    let mut labels = vec![Label::Negative; config.classes];
    let (layout, mut proposals) = if positive {
        let class = rng.random_range(0..config.classes);
        labels[class] = Label::Positive;
        let layout = sample_layout(config, class, rng);
        let counts = config.mix.counts(n);
        let mut props = Vec::with_capacity(n);
        for (kind, &count) in [
            ProposalKind::Full,
            ProposalKind::Part,
            ProposalKind::Partial,
            ProposalKind::Background,
        ]
        .iter()
        .zip(&counts)
        {
            for _ in 0..count {
                props.push((sample_proposal(config, &layout, *kind, rng), *kind));
            }
        }
        (Some(layout), props)
    } else {
        let props = (0..n)
            .map(|_| (random_box(config, rng), ProposalKind::Background))
            .collect();
        (None, props)
    };
    proposals.shuffle(rng);
    let noise = Normal::new(0.0, config.noise).map_err(|e| Error::Config(e.to_string()))?;
    let instances = proposals
        .iter()
        .map(|(bbox, _)| Instance {
            bbox: *bbox,
            features: proposal_features(config, bases, layout.as_ref(), bbox, &noise, rng),
        })
        .collect();
    Ok(GeneratedBag {
        bag: Bag {
            id,
            labels,
            ground_truth: layout
                .iter()
                .map(|l| GroundTruth {
                    class: l.class,
                    bbox: l.object,
                })
                .collect(),
            instances,
        },
        layout,
        kinds: proposals.iter().map(|(_, k)| *k).collect(),
    })
}

/// Noise-free feature vector of a proposal.
pub fn clean_features(
    config: &SynthConfig,
    bases: &[ClassBasis],
    layout: Option<&ObjectLayout>,
    bbox: &BBox,
) -> Vec<f64> {
    let mut x = vec![0.0; config.dim];
    if let Some(l) = layout {
        let basis = &bases[l.class];
        let coverage = bbox.intersection_area(&l.object) / l.object.area();
        let terms = [
            (config.beta_part * iou(bbox, &l.part), &basis.part),
            (config.beta_obj * iou(bbox, &l.object), &basis.object),
            (config.beta_class * coverage, &basis.class),
        ];
        for (coef, dir) in terms {
            x.iter_mut().zip(dir).for_each(|(a, d)| *a += coef * d);
        }
    }
    x
}

fn proposal_features(
    config: &SynthConfig,
    bases: &[ClassBasis],
    layout: Option<&ObjectLayout>,
    bbox: &BBox,
    noise: &Normal<f64>,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut x = clean_features(config, bases, layout, bbox);
    if config.noise > 0.0 {
        x.iter_mut().for_each(|a| *a += noise.sample(rng));
    }
    x
}

fn sample_layout(config: &SynthConfig, class: usize, rng: &mut ChaCha8Rng) -> ObjectLayout {
    let w = uniform(rng, config.object_size);
    let h = uniform(rng, config.object_size);
    let x1 = rng.random_range(0.0..=1.0 - w);
    let y1 = rng.random_range(0.0..=1.0 - h);
    let object = BBox {
        x1,
        y1,
        x2: x1 + w,
        y2: y1 + h,
    };
    let pw = w * uniform(rng, config.part_fraction);
    let ph = h * uniform(rng, config.part_fraction);
    let px = x1 + rng.random_range(0.0..=w - pw);
    let py = y1 + rng.random_range(0.0..=h - ph);
    let part = BBox {
        x1: px,
        y1: py,
        x2: px + pw,
        y2: py + ph,
    };
    ObjectLayout {
        class,
        object,
        part,
    }
}

/// Uniform box inside the unit square with sides in `[min_side, 0.5]`.
fn random_box(config: &SynthConfig, rng: &mut ChaCha8Rng) -> BBox {
    let hi = 0.5f64.max(config.min_side);
    let w = uniform(rng, (config.min_side, hi));
    let h = uniform(rng, (config.min_side, hi));
    let x1 = rng.random_range(0.0..=1.0 - w);
    let y1 = rng.random_range(0.0..=1.0 - h);
    BBox {
        x1,
        y1,
        x2: x1 + w,
        y2: y1 + h,
    }
}

/// Jitters every side of `b` by a fraction of its size, clipped to the unit square.
fn jitter(config: &SynthConfig, b: &BBox, amount: f64, rng: &mut ChaCha8Rng) -> Option<BBox> {
    let (w, h) = (b.width(), b.height());
    let mut d = || rng.random_range(-amount..=amount);
    let c = BBox {
        x1: b.x1 + d() * w,
        y1: b.y1 + d() * h,
        x2: b.x2 + d() * w,
        y2: b.y2 + d() * h,
    }
    .clamp_to(0.0, 1.0);
    (c.width() >= config.min_side && c.height() >= config.min_side).then_some(c)
}

/// Box containing `b` with 2 to 6 times its area, clipped to the unit square.
fn enclosing(b: &BBox, rng: &mut ChaCha8Rng) -> BBox {
    let grow = rng.random_range(2.0f64..6.0).sqrt();
    let aspect = rng.random_range(0.8f64..1.25);
    let (w, h) = (b.width() * grow * aspect, b.height() * grow / aspect);
    let (w, h) = (w.max(b.width()), h.max(b.height()));
    let x1 = b.x2 - w + rng.random::<f64>() * (w - b.width());
    let y1 = b.y2 - h + rng.random::<f64>() * (h - b.height());
    BBox {
        x1,
        y1,
        x2: x1 + w,
        y2: y1 + h,
    }
    .clamp_to(0.0, 1.0)
}

/// Rejection-samples a proposal of the given family; falls back to the last
/// valid candidate if the acceptance window is never hit.
fn sample_proposal(
    config: &SynthConfig,
    layout: &ObjectLayout,
    kind: ProposalKind,
    rng: &mut ChaCha8Rng,
) -> BBox {
    let obj = &layout.object;
    let mut fallback = match kind {
        ProposalKind::Part => layout.part,
        ProposalKind::Full | ProposalKind::Partial => *obj,
        ProposalKind::Background => random_box(config, rng),
    };
    let context = kind == ProposalKind::Partial && rng.random::<f64>() < config.context_fraction;
    for _ in 0..200 {
        let candidate = match kind {
            ProposalKind::Full => jitter(config, obj, 0.15, rng),
            ProposalKind::Part => jitter(config, &layout.part, 0.2, rng),
            ProposalKind::Partial if context => Some(enclosing(obj, rng)),
            ProposalKind::Partial => jitter(config, obj, 0.6, rng),
            ProposalKind::Background => Some(random_box(config, rng)),
        };
        let Some(c) = candidate else { continue };
        let (o, p) = (iou(&c, obj), iou(&c, &layout.part));
        let accept = match kind {
            ProposalKind::Full => o >= 0.6,
            ProposalKind::Part => p >= 0.5 && o < 0.5,
            ProposalKind::Partial => (0.1..0.5).contains(&o) && p < 0.5,
            ProposalKind::Background => c.intersection_area(obj) == 0.0,
        };
        if accept {
            return c;
        }
        if kind == ProposalKind::Background && o < iou(&fallback, obj) {
            fallback = c;
        }
    }
    fallback
}
