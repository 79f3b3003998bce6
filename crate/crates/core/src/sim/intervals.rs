use serde::Serialize;

use crate::cost::Phase;

use super::{Event, Schedule, StageTimes, Timeline};

/// A window on the first device between consecutive backward passes.
///
/// The window opens when the device finishes its previous backward (or, for
/// the first window, its first forward) and closes when the gradient for the
/// next backward arrives. Forwards executed in between fill it; whatever is
/// left over shows up as idle time before the backward starts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Interval {
    pub index: usize,
    pub start: f64,
    pub end: f64,
    /// Microbatch and virtual stage of the backward that closes the window.
    pub backward_microbatch: usize,
    pub backward_stage: usize,
    /// Microbatches whose forwards ran inside the window, in execution order.
    pub filled_by: Vec<usize>,
    /// Virtual stage of each filling forward (parallel to `filled_by`).
    pub filled_stages: Vec<usize>,
    /// Seconds of filling work.
    pub filled_time: f64,
    /// Gap on the device right before the closing backward.
    pub idle: f64,
}

impl Interval {
    pub fn volume(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntervalSet {
    pub intervals: Vec<Interval>,
}

impl IntervalSet {
    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn volumes(&self) -> Vec<f64> {
        self.intervals.iter().map(Interval::volume).collect()
    }

    pub fn total_idle(&self) -> f64 {
        self.intervals.iter().map(|i| i.idle).sum()
    }
}

/// Windows on device 0, one per backward it executes, in execution order.
pub fn get_intervals(timeline: &Timeline) -> IntervalSet {
    let stages = timeline.devices * timeline.vpp;
    let events: Vec<&Event> = timeline.device_events(0).collect();
    let mut intervals = Vec::new();
    let Some(first) = events.first() else {
        return IntervalSet { intervals };
    };
    let mut anchor = first.end;
    let mut pending: Vec<&Event> = Vec::new();
    let mut prev_end = 0.0;
    for (k, e) in events.iter().enumerate() {
        match e.phase {
            Phase::Forward => {
                if k > 0 {
                    pending.push(e);
                }
            }
            Phase::Backward => {
                let dep = if e.stage + 1 == stages {
                    timeline.find(e.microbatch, e.stage, Phase::Forward)
                } else {
                    timeline.find(e.microbatch, e.stage + 1, Phase::Backward)
                };
                let ready = dep.map_or(e.start, |d| d.end).max(anchor);
                intervals.push(Interval {
                    index: intervals.len(),
                    start: anchor,
                    end: ready,
                    backward_microbatch: e.microbatch,
                    backward_stage: e.stage,
                    filled_by: pending.iter().map(|f| f.microbatch).collect(),
                    filled_stages: pending.iter().map(|f| f.stage).collect(),
                    filled_time: pending.iter().map(|f| f.end - f.start).sum(),
                    idle: e.start - prev_end,
                });
                pending.clear();
                anchor = e.end;
            }
        }
        prev_end = e.end;
    }
    IntervalSet { intervals }
}

/// Same windows as [`get_intervals`], computed straight from a compiled
/// schedule and its op end times without materialising a timeline.
pub fn schedule_intervals(schedule: &Schedule, times: &StageTimes, end: &[f64]) -> IntervalSet {
    let mut intervals = Vec::new();
    let mut anchor: Option<f64> = None;
    let mut pending: Vec<(usize, usize, f64)> = Vec::new();
    let mut prev_end = 0.0;
    for (k, op) in schedule.ops().iter().enumerate().filter(|(_, op)| op.device == 0) {
        let start = op.prev().map_or(0.0, |j| end[j]).max(op.dep().map_or(0.0, |j| end[j]));
        match (anchor, op.phase) {
            (None, _) => anchor = Some(end[k]),
            (Some(_), Phase::Forward) => {
                pending.push((op.microbatch as usize, op.stage as usize, schedule.duration(op, times)));
            }
            (Some(open), Phase::Backward) => {
                let ready = op.dep().map_or(start, |j| end[j]).max(open);
                intervals.push(Interval {
                    index: intervals.len(),
                    start: open,
                    end: ready,
                    backward_microbatch: op.microbatch as usize,
                    backward_stage: op.stage as usize,
                    filled_by: pending.iter().map(|f| f.0).collect(),
                    filled_stages: pending.iter().map(|f| f.1).collect(),
                    filled_time: pending.iter().map(|f| f.2).sum(),
                    idle: start - prev_end,
                });
                pending.clear();
                anchor = Some(end[k]);
            }
        }
        prev_end = end[k];
    }
    IntervalSet { intervals }
}
