//! Deterministic pipeline-schedule simulation.
//!
//! Stage times are given per microbatch and physical stage. The simulator
//! compiles the 1F1B (or interleaved 1F1B) operation order for the pipeline
//! shape and replays it as a longest-path computation, producing a
//! [`Timeline`] of per-device events.

mod intervals;
mod schedule;
mod timeline;
mod trace;

pub use intervals::{get_intervals, schedule_intervals, Interval, IntervalSet};
pub use schedule::{IncrementalEvaluator, Op, Schedule};
pub use timeline::{iteration_stats, Event, IterationStats, Timeline};
pub use trace::{trace_events, write_trace, TraceEvent, TraceFile};

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize)]
pub enum SimError {
    #[error("pipeline needs at least one device and one microbatch")]
    EmptyShape,
    #[error("interleaved schedule needs the microbatch count ({microbatches}) to be a multiple of the device count ({devices}) for vpp={vpp}")]
    IndivisibleVppAssignment { devices: usize, microbatches: usize, vpp: usize },
    #[error("schedule deadlocked at device {device}")]
    Deadlock { device: usize },
    #[error("stage times have shape {found:?} (microbatches, stages), schedule expects {expected:?}")]
    ShapeMismatch { expected: (usize, usize), found: (usize, usize) },
    #[error("stage times must be finite and non-negative")]
    InvalidTime,
}

/// Forward and backward seconds for every (microbatch, physical stage).
#[derive(Debug, Clone, PartialEq)]
pub struct StageTimes {
    microbatches: usize,
    stages: usize,
    fwd: Vec<f64>,
    bwd: Vec<f64>,
}

impl StageTimes {
    pub fn zeros(microbatches: usize, stages: usize) -> Self {
        let n = microbatches * stages;
        StageTimes { microbatches, stages, fwd: vec![0.0; n], bwd: vec![0.0; n] }
    }

    pub fn homogeneous(microbatches: usize, stages: usize, tf: f64, tb: f64) -> Self {
        let n = microbatches * stages;
        StageTimes { microbatches, stages, fwd: vec![tf; n], bwd: vec![tb; n] }
    }

    /// Every microbatch shares the same per-stage times.
    pub fn uniform(microbatches: usize, fwd: &[f64], bwd: &[f64]) -> Self {
        assert_eq!(fwd.len(), bwd.len());
        StageTimes {
            microbatches,
            stages: fwd.len(),
            fwd: fwd.repeat(microbatches),
            bwd: bwd.repeat(microbatches),
        }
    }

    /// Builds from per-microbatch rows of per-stage times.
    pub fn from_rows(fwd: &[Vec<f64>], bwd: &[Vec<f64>]) -> Result<Self, SimError> {
        if fwd.is_empty() || fwd.len() != bwd.len() {
            return Err(SimError::EmptyShape);
        }
        let stages = fwd[0].len();
        if stages == 0 {
            return Err(SimError::EmptyShape);
        }
        let mut t = StageTimes::zeros(fwd.len(), stages);
        for (i, (f, b)) in fwd.iter().zip(bwd).enumerate() {
            if f.len() != stages || b.len() != stages {
                return Err(SimError::ShapeMismatch { expected: (fwd.len(), stages), found: (fwd.len(), f.len()) });
            }
            for s in 0..stages {
                t.set(i, s, f[s], b[s]);
            }
        }
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let ok = self.fwd.iter().chain(&self.bwd).all(|v| v.is_finite() && *v >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(SimError::InvalidTime)
        }
    }

    pub fn microbatches(&self) -> usize {
        self.microbatches
    }

    pub fn stages(&self) -> usize {
        self.stages
    }

    #[inline]
    pub fn fwd(&self, microbatch: usize, stage: usize) -> f64 {
        self.fwd[microbatch * self.stages + stage]
    }

    #[inline]
    pub fn bwd(&self, microbatch: usize, stage: usize) -> f64 {
        self.bwd[microbatch * self.stages + stage]
    }

    pub fn set(&mut self, microbatch: usize, stage: usize, fwd: f64, bwd: f64) {
        let k = microbatch * self.stages + stage;
        self.fwd[k] = fwd;
        self.bwd[k] = bwd;
    }

    /// Copies one microbatch row from another table with the same stage count.
    pub fn copy_row_from(&mut self, microbatch: usize, other: &StageTimes, other_microbatch: usize) {
        debug_assert_eq!(self.stages, other.stages);
        let s = self.stages;
        let dst = microbatch * s..(microbatch + 1) * s;
        let src = other_microbatch * s..(other_microbatch + 1) * s;
        self.fwd[dst.clone()].copy_from_slice(&other.fwd[src.clone()]);
        self.bwd[dst].copy_from_slice(&other.bwd[src]);
    }

    pub fn fwd_row(&self, microbatch: usize) -> &[f64] {
        &self.fwd[microbatch * self.stages..(microbatch + 1) * self.stages]
    }

    pub fn bwd_row(&self, microbatch: usize) -> &[f64] {
        &self.bwd[microbatch * self.stages..(microbatch + 1) * self.stages]
    }

    /// Rows permuted so that output microbatch `j` is input microbatch `order[j]`.
    pub fn permuted(&self, order: &[usize]) -> StageTimes {
        let mut out = StageTimes::zeros(order.len(), self.stages);
        for (j, &i) in order.iter().enumerate() {
            out.copy_row_from(j, self, i);
        }
        out
    }

    /// Splits each physical stage into `vpp` virtual stages of equal time.
    /// Virtual stage `c * p + d` carries device `d`'s time divided by `vpp`.
    pub fn split_virtual(&self, vpp: usize) -> StageTimes {
        let p = self.stages;
        let mut out = StageTimes::zeros(self.microbatches, p * vpp);
        for i in 0..self.microbatches {
            for c in 0..vpp {
                for d in 0..p {
                    out.set(i, c * p + d, self.fwd(i, d) / vpp as f64, self.bwd(i, d) / vpp as f64);
                }
            }
        }
        out
    }
}

/// Plain 1F1B timeline.
pub fn schedule_1f1b(times: &StageTimes) -> Result<Timeline, SimError> {
    times.validate()?;
    if times.microbatches() == 0 || times.stages() == 0 {
        return Err(SimError::EmptyShape);
    }
    let schedule = Schedule::one_f_one_b(times.stages(), times.microbatches());
    Timeline::from_schedule(&schedule, times)
}

/// Interleaved 1F1B timeline; `vpp = 1` is identical to [`schedule_1f1b`].
pub fn schedule_interleaved(times: &StageTimes, vpp: usize) -> Result<Timeline, SimError> {
    times.validate()?;
    let schedule = Schedule::build(times.stages(), times.microbatches(), vpp)?;
    Timeline::from_schedule(&schedule, times)
}
