//! Instance selector and detector heads over per-instance feature vectors.
//!
//! Both heads read the same input features but own separate weights. The
//! selector emits one unbounded score per class; the detector emits `C + 1`
//! logits (the last channel is background) that are turned into probabilities
//! with a softmax. Each head is either a single affine map or, when
//! `Architecture::hidden > 0`, a tanh hidden layer followed by an affine map.
//!
//! All parameters live in one flat vector so the optimizer, the gradient
//! checker and the checkpoint writer can treat them uniformly.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// One candidate region: a box and its feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub bbox: BBox,
    pub features: Vec<f64>,
}

/// Bag-level label for one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "i8", into = "i8")]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn sign(self) -> f64 {
        match self {
            Label::Positive => 1.0,
            Label::Negative => -1.0,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }
}

impl TryFrom<i8> for Label {
    type Error = String;

    fn try_from(v: i8) -> std::result::Result<Self, Self::Error> {
        match v {
            1 => Ok(Label::Positive),
            -1 => Ok(Label::Negative),
            other => Err(format!("bag label must be 1 or -1, got {other}")),
        }
    }
}

impl From<Label> for i8 {
    fn from(l: Label) -> i8 {
        match l {
            Label::Positive => 1,
            Label::Negative => -1,
        }
    }
}

/// Annotated object box, used only by evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class: usize,
    pub bbox: BBox,
}

/// A weakly labelled example: instances plus one label per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bag {
    pub id: String,
    pub labels: Vec<Label>,
    #[serde(default)]
    pub ground_truth: Vec<GroundTruth>,
    pub instances: Vec<Instance>,
}

impl Bag {
    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.instances.iter().map(|i| i.bbox).collect()
    }

    pub fn ground_truth_for(&self, class: usize) -> impl Iterator<Item = &BBox> {
        self.ground_truth
            .iter()
            .filter(move |g| g.class == class)
            .map(|g| &g.bbox)
    }

    /// Checks the bag against a dataset's class count and feature dimension.
    pub fn validate(&self, classes: usize, dim: usize) -> Result<()> {
        if self.instances.is_empty() {
            return Err(Error::Precondition(format!("bag `{}` has no instances", self.id)));
        }
        if self.labels.len() != classes {
            return Err(Error::Config(format!(
                "bag `{}` has {} labels, expected {classes}",
                self.id,
                self.labels.len()
            )));
        }
        for inst in &self.instances {
            if inst.features.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: inst.features.len(),
                });
            }
            if !inst.bbox.is_valid() {
                let b = inst.bbox;
                return Err(Error::InvalidBox([b.x1, b.y1, b.x2, b.y2]));
            }
            if inst.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!(
                    "bag `{}` has a non-finite feature value",
                    self.id
                )));
            }
        }
        for gt in &self.ground_truth {
            if gt.class >= classes {
                return Err(Error::Config(format!(
                    "bag `{}` has ground truth for class {} of {classes}",
                    self.id, gt.class
                )));
            }
            if !gt.bbox.is_valid() {
                let b = gt.bbox;
                return Err(Error::InvalidBox([b.x1, b.y1, b.x2, b.y2]));
            }
        }
        Ok(())
    }
}

/// Shape of a model: class count, input dimension and optional hidden width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub classes: usize,
    pub dim: usize,
    /// Hidden units per head; 0 means purely linear heads.
    #[serde(default)]
    pub hidden: usize,
}

impl Architecture {
    pub fn linear(classes: usize, dim: usize) -> Self {
        Architecture {
            classes,
            dim,
            hidden: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.dim == 0 {
            return Err(Error::Config(
                "classes and feature dimension must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn selector(&self) -> HeadLayout {
        HeadLayout {
            offset: 0,
            inputs: self.dim,
            hidden: self.hidden,
            outputs: self.classes,
        }
    }

    pub fn detector(&self) -> HeadLayout {
        let sel = self.selector();
        HeadLayout {
            offset: sel.offset + sel.len(),
            inputs: self.dim,
            hidden: self.hidden,
            outputs: self.classes + 1,
        }
    }

    pub fn param_count(&self) -> usize {
        self.selector().len() + self.detector().len()
    }

    /// Index of the background channel in detector outputs.
    pub fn background(&self) -> usize {
        self.classes
    }
}

/// Where one head's tensors sit inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadLayout {
    pub offset: usize,
    pub inputs: usize,
    pub hidden: usize,
    pub outputs: usize,
}

impl HeadLayout {
    fn out_inputs(&self) -> usize {
        if self.hidden > 0 {
            self.hidden
        } else {
            self.inputs
        }
    }

    /// `(name, rows, cols, offset)` for every tensor of the head, in storage order.
    pub fn tensors(&self) -> Vec<(&'static str, usize, usize, usize)> {
        let mut out = Vec::with_capacity(4);
        let mut at = self.offset;
        if self.hidden > 0 {
            out.push(("hidden.weight", self.hidden, self.inputs, at));
            at += self.hidden * self.inputs;
            out.push(("hidden.bias", 1, self.hidden, at));
            at += self.hidden;
        }
        out.push(("out.weight", self.outputs, self.out_inputs(), at));
        at += self.outputs * self.out_inputs();
        out.push(("out.bias", 1, self.outputs, at));
        out
    }

    pub fn len(&self) -> usize {
        let hidden = if self.hidden > 0 {
            self.hidden * (self.inputs + 1)
        } else {
            0
        };
        hidden + self.outputs * (self.out_inputs() + 1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn out_weight(&self) -> usize {
        self.offset
            + if self.hidden > 0 {
                self.hidden * (self.inputs + 1)
            } else {
                0
            }
    }

    fn out_bias(&self) -> usize {
        self.out_weight() + self.outputs * self.out_inputs()
    }

    /// Forward pass; returns the hidden activations (empty when linear) and outputs.
    fn forward(&self, params: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hidden = if self.hidden > 0 {
            let w = &params[self.offset..self.offset + self.hidden * self.inputs];
            let b = &params[self.offset + self.hidden * self.inputs..][..self.hidden];
            (0..self.hidden)
                .map(|k| (dot(&w[k * self.inputs..][..self.inputs], x) + b[k]).tanh())
                .collect()
        } else {
            Vec::new()
        };
        let input: &[f64] = if self.hidden > 0 { &hidden } else { x };
        let n = self.out_inputs();
        let w = &params[self.out_weight()..][..self.outputs * n];
        let b = &params[self.out_bias()..][..self.outputs];
        let out = (0..self.outputs)
            .map(|o| dot(&w[o * n..][..n], input) + b[o])
            .collect();
        (hidden, out)
    }

    /// Single output of the head, avoiding the full output vector when linear.
    fn forward_one(&self, params: &[f64], x: &[f64], output: usize) -> f64 {
        if self.hidden > 0 {
            return self.forward(params, x).1[output];
        }
        let w = &params[self.out_weight() + output * self.inputs..][..self.inputs];
        dot(w, x) + params[self.out_bias() + output]
    }

    /// Accumulates `d loss / d params` given `d loss / d outputs`.
    fn backward(&self, params: &[f64], x: &[f64], upstream: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(upstream.len(), self.outputs);
        if upstream.iter().all(|&u| u == 0.0) {
            return;
        }
        let n = self.out_inputs();
        let hidden = if self.hidden > 0 {
            self.forward(params, x).0
        } else {
            Vec::new()
        };
        let input: &[f64] = if self.hidden > 0 { &hidden } else { x };
        let (ow, ob) = (self.out_weight(), self.out_bias());
        for (o, &u) in upstream.iter().enumerate() {
            if u == 0.0 {
                continue;
            }
            for (g, &xi) in grad[ow + o * n..][..n].iter_mut().zip(input) {
                *g += u * xi;
            }
            grad[ob + o] += u;
        }
        if self.hidden == 0 {
            return;
        }
        let (hw, hb) = (self.offset, self.offset + self.hidden * self.inputs);
        for (k, &h) in hidden.iter().enumerate() {
            let dh: f64 = upstream
                .iter()
                .enumerate()
                .map(|(o, &u)| u * params[ow + o * n + k])
                .sum();
            let dpre = dh * (1.0 - h * h);
            if dpre == 0.0 {
                continue;
            }
            for (g, &xi) in grad[hw + k * self.inputs..][..self.inputs]
                .iter_mut()
                .zip(x)
            {
                *g += dpre * xi;
            }
            grad[hb + k] += dpre;
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable softmax (logits shifted by their maximum).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Natural log of the softmax, computed without forming tiny probabilities.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

/// Selector and detector parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    values: Vec<f64>,
}

/// Accumulated gradient, shaped like [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer {
    arch: Architecture,
    values: Vec<f64>,
}

impl GradientBuffer {
    pub fn zeros(arch: Architecture) -> Self {
        GradientBuffer {
            arch,
            values: vec![0.0; arch.param_count()],
        }
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn clear(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Adds another worker's buffer into this one.
    pub fn merge(&mut self, other: &GradientBuffer) {
        assert_eq!(self.arch, other.arch, "merging incongruent gradient buffers");
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl ModelParams {
    pub fn zeros(arch: Architecture) -> Self {
        ModelParams {
            arch,
            values: vec![0.0; arch.param_count()],
        }
    }

    /// Gaussian output weights with standard deviation `scale`, zero biases.
    /// Hidden layers (if any) use a `1/sqrt(dim)` scale so tanh starts unsaturated.
    pub fn random<R: Rng + ?Sized>(arch: Architecture, scale: f64, rng: &mut R) -> Self {
        let mut p = ModelParams::zeros(arch);
        let out = Normal::new(0.0, scale.max(0.0)).expect("finite scale");
        let hid = Normal::new(0.0, 1.0 / (arch.dim as f64).sqrt()).expect("finite scale");
        for head in [arch.selector(), arch.detector()] {
            for (name, rows, cols, at) in head.tensors() {
                let dist = match name {
                    "hidden.weight" => &hid,
                    "out.weight" => &out,
                    _ => continue,
                };
                for v in &mut p.values[at..at + rows * cols] {
                    *v = dist.sample(rng);
                }
            }
        }
        p
    }

    pub fn from_values(arch: Architecture, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.param_count() {
            return Err(Error::Config(format!(
                "expected {} parameters, got {}",
                arch.param_count(),
                values.len()
            )));
        }
        Ok(ModelParams { arch, values })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn gradient_buffer(&self) -> GradientBuffer {
        GradientBuffer::zeros(self.arch)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm of all parameters.
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Mutable view of the selector's output row for `class` (linear heads:
    /// the weight vector over input features) followed by nothing else.
    pub fn selector_weights_mut(&mut self, class: usize) -> &mut [f64] {
        let h = self.arch.selector();
        let n = h.out_inputs();
        &mut self.values[h.out_weight() + class * n..][..n]
    }

    pub fn selector_bias_mut(&mut self, class: usize) -> &mut f64 {
        let h = self.arch.selector();
        &mut self.values[h.out_bias() + class]
    }

    pub fn detector_weights_mut(&mut self, channel: usize) -> &mut [f64] {
        let h = self.arch.detector();
        let n = h.out_inputs();
        &mut self.values[h.out_weight() + channel * n..][..n]
    }

    pub fn detector_bias_mut(&mut self, channel: usize) -> &mut f64 {
        let h = self.arch.detector();
        &mut self.values[h.out_bias() + channel]
    }

    fn check_dim(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.arch.dim {
            return Err(Error::DimensionMismatch {
                expected: self.arch.dim,
                found: features.len(),
            });
        }
        Ok(())
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.arch.classes {
            return Err(Error::Config(format!(
                "class {class} out of range for {} classes",
                self.arch.classes
            )));
        }
        Ok(())
    }

    /// Object score of an instance for one class.
    pub fn selector_score(&self, instance: &Instance, class: usize) -> Result<f64> {
        self.check_dim(&instance.features)?;
        self.check_class(class)?;
        Ok(self
            .arch
            .selector()
            .forward_one(&self.values, &instance.features, class))
    }

    /// Selector scores for all classes. Panics on a dimension mismatch.
    pub fn selector_scores(&self, features: &[f64]) -> Vec<f64> {
        assert_eq!(features.len(), self.arch.dim, "feature dimension mismatch");
        self.arch.selector().forward(&self.values, features).1
    }

    /// Detector logits over `C + 1` channels. Panics on a dimension mismatch.
    pub fn detector_logits(&self, features: &[f64]) -> Vec<f64> {
        assert_eq!(features.len(), self.arch.dim, "feature dimension mismatch");
        self.arch.detector().forward(&self.values, features).1
    }

    /// Detector class probabilities (last entry is background).
    pub fn detector_prob(&self, instance: &Instance) -> Result<Vec<f64>> {
        self.check_dim(&instance.features)?;
        Ok(softmax(&self.detector_logits(&instance.features)))
    }

    /// Adds `upstream * d score(class) / d params` into `buf`.
    pub fn selector_backward(
        &self,
        instance: &Instance,
        class: usize,
        upstream: f64,
        buf: &mut GradientBuffer,
    ) {
        self.check_buffer(buf);
        if upstream == 0.0 {
            return;
        }
        let mut up = vec![0.0; self.arch.classes];
        up[class] = upstream;
        self.arch
            .selector()
            .backward(&self.values, &instance.features, &up, &mut buf.values);
    }

    /// Adds `sum_c upstream[c] * d score(c) / d params` into `buf`.
    pub fn selector_backward_all(
        &self,
        instance: &Instance,
        upstream: &[f64],
        buf: &mut GradientBuffer,
    ) {
        self.check_buffer(buf);
        self.arch
            .selector()
            .backward(&self.values, &instance.features, upstream, &mut buf.values);
    }

    /// Adds the gradient given `d loss / d probabilities` into `buf`.
    pub fn detector_backward(
        &self,
        instance: &Instance,
        prob_grad: &[f64],
        buf: &mut GradientBuffer,
    ) {
        let p = softmax(&self.detector_logits(&instance.features));
        let inner: f64 = p.iter().zip(prob_grad).map(|(a, b)| a * b).sum();
        let logit_grad: Vec<f64> = p
            .iter()
            .zip(prob_grad)
            .map(|(&pk, &gk)| pk * (gk - inner))
            .collect();
        self.detector_backward_logits(instance, &logit_grad, buf);
    }

    /// Adds the gradient given `d loss / d logits` into `buf`.
    pub fn detector_backward_logits(
        &self,
        instance: &Instance,
        logit_grad: &[f64],
        buf: &mut GradientBuffer,
    ) {
        self.check_buffer(buf);
        self.arch
            .detector()
            .backward(&self.values, &instance.features, logit_grad, &mut buf.values);
    }

    fn check_buffer(&self, buf: &GradientBuffer) {
        assert_eq!(
            buf.arch, self.arch,
            "gradient buffer shape does not match parameters"
        );
    }

    /// Serialises the parameters in the text checkpoint format.
    pub fn to_checkpoint_string(&self) -> String {
        let a = self.arch;
        let mut s = String::new();
        let _ = writeln!(s, "cmil-checkpoint {CHECKPOINT_VERSION}");
        let _ = writeln!(s, "classes {}", a.classes);
        let _ = writeln!(s, "dim {}", a.dim);
        let _ = writeln!(s, "hidden {}", a.hidden);
        for (head, layout) in [("selector", a.selector()), ("detector", a.detector())] {
            for (name, rows, cols, at) in layout.tensors() {
                let _ = writeln!(s, "tensor {head}.{name} {rows} {cols}");
                for r in 0..rows {
                    let row = &self.values[at + r * cols..][..cols];
                    let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
                    let _ = writeln!(s, "{}", line.join(" "));
                }
            }
        }
        s
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::parse("end of checkpoint", format!("missing {what}")))
        };
        let (ln, magic) = next("header")?;
        let version: u32 = match magic.split_once(' ') {
            Some(("cmil-checkpoint", v)) => v
                .parse()
                .map_err(|_| Error::parse(format!("line {ln}"), "bad version"))?,
            _ => return Err(Error::parse(format!("line {ln}"), "not a cmil checkpoint")),
        };
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let mut field = |key: &str| -> Result<usize> {
            let (ln, line) = next(key)?;
            match line.split_once(' ') {
                Some((k, v)) if k == key => v
                    .trim()
                    .parse()
                    .map_err(|_| Error::parse(format!("line {ln}"), format!("bad {key}"))),
                _ => Err(Error::parse(format!("line {ln}"), format!("expected `{key}`"))),
            }
        };
        let arch = Architecture {
            classes: field("classes")?,
            dim: field("dim")?,
            hidden: field("hidden")?,
        };
        arch.validate()?;
        let mut values = vec![0.0; arch.param_count()];
        for (head, layout) in [("selector", arch.selector()), ("detector", arch.detector())] {
            for (name, rows, cols, at) in layout.tensors() {
                let (ln, line) = next("tensor header")?;
                let expected = format!("tensor {head}.{name} {rows} {cols}");
                if line != expected {
                    return Err(Error::parse(
                        format!("line {ln}"),
                        format!("expected `{expected}`, found `{line}`"),
                    ));
                }
                for r in 0..rows {
                    let (ln, line) = next("tensor row")?;
                    let row: Vec<f64> = line
                        .split_whitespace()
                        .map(|t| t.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| Error::parse(format!("line {ln}"), e.to_string()))?;
                    if row.len() != cols {
                        return Err(Error::parse(
                            format!("line {ln}"),
                            format!("expected {cols} values, found {}", row.len()),
                        ));
                    }
                    if row.iter().any(|v| !v.is_finite()) {
                        return Err(Error::parse(format!("line {ln}"), "non-finite weight"));
                    }
                    values[at + r * cols..][..cols].copy_from_slice(&row);
                }
            }
        }
        if let Some((ln, _)) = lines.next() {
            return Err(Error::parse(format!("line {ln}"), "trailing data"));
        }
        Ok(ModelParams { arch, values })
    }

    pub fn write_checkpoint(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_checkpoint_string().as_bytes())
    }

    pub fn read_checkpoint(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ModelParams::from_checkpoint_str(&text)
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;
