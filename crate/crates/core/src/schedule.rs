//! Delay / linear-warmup / constant schedule for the reversal coefficient,
//! plus the grids used to search over it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `mu` iterations at zero, a linear ramp over `w` iterations, then `c`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub mu: usize,
    pub w: usize,
    pub c: f64,
}

impl ScheduleParams {
    pub fn new(mu: usize, w: usize, c: f64) -> Result<Self> {
        let s = Self { mu, w, c };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.w < 1 {
            return Err(Error::Parameter("schedule warmup w must be >= 1".into()));
        }
        if !(self.c >= 0.0) || !self.c.is_finite() {
            return Err(Error::Parameter(format!("schedule constant c must be finite and >= 0, got {}", self.c)));
        }
        Ok(())
    }

    /// True for the degenerate `mu = 0, w = 1` schedule.
    pub fn is_static(&self) -> bool {
        self.mu == 0 && self.w == 1
    }

    /// Scales `mu` and `w` by `ratio`, rounding each to the nearest
    /// multiple of 50 (never below 50 for `w`).
    pub fn rescaled(&self, ratio: f64) -> Self {
        let round50 = |x: usize| ((x as f64 * ratio / 50.0).round() as usize) * 50;
        Self { mu: round50(self.mu), w: round50(self.w).max(50), c: self.c }
    }
}

/// Run-config form: `{"mu": .., "w": .., "c": ..}` or `{"static": c}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScheduleSpec {
    Static(StaticSchedule),
    Ramp(ScheduleParams),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StaticSchedule {
    #[serde(rename = "static")]
    pub value: f64,
}

impl ScheduleSpec {
    pub fn params(&self) -> Result<ScheduleParams> {
        match *self {
            ScheduleSpec::Static(StaticSchedule { value }) => {
                let s = static_schedule(value);
                s.validate()?;
                Ok(s)
            }
            ScheduleSpec::Ramp(p) => {
                p.validate()?;
                Ok(p)
            }
        }
    }
}

impl From<ScheduleParams> for ScheduleSpec {
    fn from(p: ScheduleParams) -> Self {
        if p.is_static() {
            ScheduleSpec::Static(StaticSchedule { value: p.c })
        } else {
            ScheduleSpec::Ramp(p)
        }
    }
}

/// `lambda_grl` at iteration `t`.
pub fn lambda_grl_at(t: usize, s: &ScheduleParams) -> f64 {
    if t <= s.mu {
        0.0
    } else if t <= s.mu + s.w {
        s.c * ((t - s.mu) as f64 / s.w as f64)
    } else {
        s.c
    }
}

/// Constant `c` for every iteration `t >= 1`.
pub fn static_schedule(c: f64) -> ScheduleParams {
    ScheduleParams { mu: 0, w: 1, c }
}

pub const STANDARD_DELAYS: [usize; 7] = [0, 1000, 2000, 3000, 4000, 5000, 6000];
pub const STANDARD_WARMUPS: [usize; 4] = [1000, 2000, 3000, 4000];
pub const ACCELERATED_DELAYS: [usize; 7] = [500, 1000, 1500, 2000, 2500, 3000, 3500];
pub const ACCELERATED_WARMUPS: [usize; 4] = [500, 1000, 2000, 4000];

/// Iteration budget the grids are expressed in.
pub const REFERENCE_ITERATIONS: usize = 16_000;

/// Cross product of delays and warmups (delay-major), each with `c = 1`.
pub fn grid(standard: bool) -> Vec<ScheduleParams> {
    let (delays, warmups): (&[usize], &[usize]) = if standard {
        (&STANDARD_DELAYS, &STANDARD_WARMUPS)
    } else {
        (&ACCELERATED_DELAYS, &ACCELERATED_WARMUPS)
    };
    delays
        .iter()
        .flat_map(|&mu| warmups.iter().map(move |&w| ScheduleParams { mu, w, c: 1.0 }))
        .collect()
}

/// [`grid`] rescaled from [`REFERENCE_ITERATIONS`] to `total_iterations`,
/// with final value `c`.
pub fn scaled_grid(standard: bool, total_iterations: usize, c: f64) -> Vec<ScheduleParams> {
    let ratio = total_iterations as f64 / REFERENCE_ITERATIONS as f64;
    grid(standard)
        .into_iter()
        .map(|s| ScheduleParams { c, ..s.rescaled(ratio) })
        .collect()
}
