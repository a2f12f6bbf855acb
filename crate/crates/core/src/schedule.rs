//! Continuation schedules: monotone maps from training progress `t` in
//! `[0, 1]` to `lambda` in `[0, 1]` with `F(0) = 0` and `F(1) = 1`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    /// Zero until 1/4, linear ramp to 3/4, one afterwards.
    #[serde(rename = "pwlinear")]
    PiecewiseLinear,
    Sigmoid,
    Exp,
    Log,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 5] = [
        ScheduleKind::Linear,
        ScheduleKind::PiecewiseLinear,
        ScheduleKind::Sigmoid,
        ScheduleKind::Exp,
        ScheduleKind::Log,
    ];

    /// Shape parameter used when none is given.
    pub fn default_k(self) -> f64 {
        match self {
            ScheduleKind::Sigmoid => 10.0,
            ScheduleKind::Exp => 3.0,
            ScheduleKind::Log => 10.0,
            ScheduleKind::Linear | ScheduleKind::PiecewiseLinear => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::PiecewiseLinear => "pwlinear",
            ScheduleKind::Sigmoid => "sigmoid",
            ScheduleKind::Exp => "exp",
            ScheduleKind::Log => "log",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScheduleKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown schedule `{s}` (expected linear, pwlinear, sigmoid, exp or log)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    /// Shape parameter; ignored by `linear` and `pwlinear`.
    pub k: f64,
}

impl Schedule {
    pub fn new(kind: ScheduleKind) -> Self {
        Schedule {
            kind,
            k: kind.default_k(),
        }
    }

    pub fn with_k(kind: ScheduleKind, k: f64) -> Result<Self> {
        let s = Schedule { kind, k };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k.is_finite() && self.k > 0.0) {
            return Err(Error::Config(format!(
                "schedule shape parameter must be positive, got {}",
                self.k
            )));
        }
        Ok(())
    }

    /// `lambda` at progress `t`. Out-of-range `t` is clamped with a warning.
    pub fn lambda_at(&self, t: f64) -> f64 {
        let t = if (0.0..=1.0).contains(&t) {
            t
        } else {
            log::warn!("schedule progress {t} outside [0, 1]; clamping");
            if t.is_nan() {
                0.0
            } else {
                t.clamp(0.0, 1.0)
            }
        };
        if t == 0.0 {
            return 0.0;
        }
        if t == 1.0 {
            return 1.0;
        }
        let k = self.k;
        let v = match self.kind {
            ScheduleKind::Linear => t,
            ScheduleKind::PiecewiseLinear => ((t - 0.25) * 2.0).clamp(0.0, 1.0),
            ScheduleKind::Sigmoid => {
                let s = |x: f64| 1.0 / (1.0 + (-k * (x - 0.5)).exp());
                (s(t) - s(0.0)) / (s(1.0) - s(0.0))
            }
            ScheduleKind::Exp => (k * t).exp_m1() / k.exp_m1(),
            ScheduleKind::Log => (k * t).ln_1p() / k.ln_1p(),
        };
        v.clamp(0.0, 1.0)
    }

    /// `lambda` for a zero-based epoch; the last epoch is exactly 1.
    pub fn epoch_lambda(&self, epoch: usize, total_epochs: usize) -> Result<f64> {
        if total_epochs < 2 || epoch >= total_epochs {
            return Err(Error::Config(format!(
                "epoch {epoch} of {total_epochs}: need total_epochs >= 2 and epoch < total_epochs"
            )));
        }
        Ok(self.lambda_at(epoch as f64 / (total_epochs - 1) as f64))
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::new(ScheduleKind::Log)
    }
}
