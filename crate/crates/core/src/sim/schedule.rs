//! Compiled 1F1B and interleaved 1F1B schedules.
//!
//! A [`Schedule`] fixes the per-device operation order for a pipeline shape
//! `(devices, microbatches, vpp)` and stores the operations in a topological
//! order together with their two predecessors: the previous operation on the
//! same device and the upstream data dependency. Evaluating a schedule
//! against concrete stage times is then a single forward pass:
//! `end(op) = max(end(prev), end(dep)) + duration(op)`.

use crate::cost::Phase;

use super::{SimError, StageTimes};

const NONE: u32 = u32::MAX;

/// One compiled pipeline operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Op {
    pub device: u32,
    pub microbatch: u32,
    /// Virtual stage index; equals the device index when vpp is 1.
    pub stage: u32,
    pub phase: Phase,
    prev: u32,
    dep: u32,
}

impl Op {
    /// Previous operation on the same device, as an index into [`Schedule::ops`].
    pub fn prev(&self) -> Option<usize> {
        (self.prev != NONE).then_some(self.prev as usize)
    }

    /// Upstream data dependency, as an index into [`Schedule::ops`].
    pub fn dep(&self) -> Option<usize> {
        (self.dep != NONE).then_some(self.dep as usize)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    devices: usize,
    microbatches: usize,
    vpp: usize,
    ops: Vec<Op>,
    /// Op index of every `(phase, microbatch, stage)`.
    index: Vec<u32>,
}

type Slot = (u32, u32, Phase);

impl Schedule {
    /// Plain 1F1B: device `s` runs `min(p - s, l)` forwards, then alternates
    /// one backward and one forward, then drains the remaining backwards.
    pub fn one_f_one_b(devices: usize, microbatches: usize) -> Self {
        assert!(devices >= 1 && microbatches >= 1, "pipeline shape must be non-empty");
        let orders = (0..devices)
            .map(|s| {
                let warm = (devices - s).min(microbatches);
                let mut order: Vec<Slot> = Vec::with_capacity(2 * microbatches);
                order.extend((0..warm).map(|i| (i as u32, s as u32, Phase::Forward)));
                for i in 0..microbatches {
                    order.push((i as u32, s as u32, Phase::Backward));
                    if warm + i < microbatches {
                        order.push(((warm + i) as u32, s as u32, Phase::Forward));
                    }
                }
                order
            })
            .collect();
        Schedule::compile(devices, microbatches, 1, orders).expect("1F1B order is always deadlock-free")
    }

    /// Interleaved 1F1B with `vpp` model chunks per device. Chunk `c` of
    /// device `d` is virtual stage `c * p + d`. Microbatches advance in groups
    /// of `p`, so the microbatch count must be a multiple of the device count.
    pub fn interleaved(devices: usize, microbatches: usize, vpp: usize) -> Result<Self, SimError> {
        if vpp == 0 || devices == 0 || microbatches == 0 {
            return Err(SimError::EmptyShape);
        }
        if vpp == 1 {
            return Ok(Schedule::one_f_one_b(devices, microbatches));
        }
        if !microbatches.is_multiple_of(devices) {
            return Err(SimError::IndivisibleVppAssignment { devices, microbatches, vpp });
        }
        let (p, l, v) = (devices, microbatches, vpp);
        let total = l * v;
        let slot = |k: usize, d: usize, phase: Phase| -> Slot {
            let group = k / (p * v);
            let within = k % (p * v);
            let chunk = match phase {
                Phase::Forward => within / p,
                Phase::Backward => v - 1 - within / p,
            };
            let mb = group * p + within % p;
            (mb as u32, (chunk * p + d) as u32, phase)
        };
        let orders = (0..p)
            .map(|d| {
                let warm = ((p - d - 1) * 2 + (v - 1) * p).min(total);
                let mut order = Vec::with_capacity(2 * total);
                order.extend((0..warm).map(|k| slot(k, d, Phase::Forward)));
                for k in 0..total - warm {
                    order.push(slot(warm + k, d, Phase::Forward));
                    order.push(slot(k, d, Phase::Backward));
                }
                order.extend((total - warm..total).map(|k| slot(k, d, Phase::Backward)));
                order
            })
            .collect();
        Schedule::compile(p, l, v, orders)
    }

    /// Dispatches on `vpp`: 1 gives plain 1F1B.
    pub fn build(devices: usize, microbatches: usize, vpp: usize) -> Result<Self, SimError> {
        if vpp == 1 {
            if devices == 0 || microbatches == 0 {
                return Err(SimError::EmptyShape);
            }
            return Ok(Schedule::one_f_one_b(devices, microbatches));
        }
        Schedule::interleaved(devices, microbatches, vpp)
    }

    fn compile(devices: usize, microbatches: usize, vpp: usize, orders: Vec<Vec<Slot>>) -> Result<Self, SimError> {
        let stages = devices * vpp;
        let key = |mb: u32, stage: u32, phase: Phase| -> usize {
            let base = match phase {
                Phase::Forward => 0,
                Phase::Backward => microbatches * stages,
            };
            base + mb as usize * stages + stage as usize
        };
        let dep_key = |mb: u32, stage: u32, phase: Phase| -> Option<usize> {
            match phase {
                Phase::Forward if stage == 0 => None,
                Phase::Forward => Some(key(mb, stage - 1, Phase::Forward)),
                Phase::Backward if stage as usize + 1 == stages => Some(key(mb, stage, Phase::Forward)),
                Phase::Backward => Some(key(mb, stage + 1, Phase::Backward)),
            }
        };

        let total: usize = orders.iter().map(Vec::len).sum();
        let mut index = vec![NONE; 2 * microbatches * stages];
        let mut ops = Vec::with_capacity(total);
        let mut heads = vec![0usize; devices];
        let mut last = vec![NONE; devices];
        while ops.len() < total {
            let mut progressed = false;
            for d in 0..devices {
                while let Some(&(mb, stage, phase)) = orders[d].get(heads[d]) {
                    let dep = match dep_key(mb, stage, phase) {
                        Some(k) if index[k] == NONE => break,
                        Some(k) => index[k],
                        None => NONE,
                    };
                    let at = ops.len() as u32;
                    ops.push(Op { device: d as u32, microbatch: mb, stage, phase, prev: last[d], dep });
                    index[key(mb, stage, phase)] = at;
                    last[d] = at;
                    heads[d] += 1;
                    progressed = true;
                }
            }
            if !progressed {
                let device = (0..devices).find(|d| heads[*d] < orders[*d].len()).unwrap_or(0);
                return Err(SimError::Deadlock { device });
            }
        }
        Ok(Schedule { devices, microbatches, vpp, ops, index })
    }

    pub fn devices(&self) -> usize {
        self.devices
    }

    pub fn microbatches(&self) -> usize {
        self.microbatches
    }

    pub fn vpp(&self) -> usize {
        self.vpp
    }

    pub fn virtual_stages(&self) -> usize {
        self.devices * self.vpp
    }

    /// Operations in a topological order of the dependency graph.
    pub fn ops(&self) -> &[Op] {
        &self.ops
    }

    pub fn op_index(&self, microbatch: usize, stage: usize, phase: Phase) -> usize {
        let stages = self.virtual_stages();
        let base = match phase {
            Phase::Forward => 0,
            Phase::Backward => self.microbatches * stages,
        };
        self.index[base + microbatch * stages + stage] as usize
    }

    fn check_shape(&self, times: &StageTimes) -> Result<(), SimError> {
        if times.microbatches() != self.microbatches || times.stages() != self.devices {
            return Err(SimError::ShapeMismatch {
                expected: (self.microbatches, self.devices),
                found: (times.microbatches(), times.stages()),
            });
        }
        Ok(())
    }

    /// Duration of one operation: the physical stage time of its device,
    /// split evenly across the device's virtual chunks.
    #[inline]
    pub fn duration(&self, op: &Op, times: &StageTimes) -> f64 {
        let t = match op.phase {
            Phase::Forward => times.fwd(op.microbatch as usize, op.device as usize),
            Phase::Backward => times.bwd(op.microbatch as usize, op.device as usize),
        };
        if self.vpp == 1 {
            t
        } else {
            t / self.vpp as f64
        }
    }

    /// Fills `end` with the completion time of every op (indexed like [`Schedule::ops`]).
    pub fn end_times_into(&self, times: &StageTimes, end: &mut Vec<f64>) -> Result<(), SimError> {
        self.check_shape(times)?;
        end.clear();
        end.reserve(self.ops.len());
        for op in &self.ops {
            let prev = if op.prev == NONE { 0.0 } else { end[op.prev as usize] };
            let dep = if op.dep == NONE { 0.0 } else { end[op.dep as usize] };
            end.push(prev.max(dep) + self.duration(op, times));
        }
        Ok(())
    }

    pub fn end_times(&self, times: &StageTimes) -> Result<Vec<f64>, SimError> {
        let mut end = Vec::new();
        self.end_times_into(times, &mut end)?;
        Ok(end)
    }

    /// Iteration time only; avoids building a timeline.
    pub fn makespan(&self, times: &StageTimes) -> Result<f64, SimError> {
        let mut end = Vec::new();
        self.end_times_into(times, &mut end)?;
        Ok(end.iter().copied().fold(0.0, f64::max))
    }
}

/// Re-evaluates a schedule after some microbatches change, recomputing only
/// operations whose inputs are affected. Produces bit-identical end times to
/// a full evaluation.
#[derive(Debug, Clone)]
pub struct IncrementalEvaluator<'a> {
    schedule: &'a Schedule,
    end: Vec<f64>,
    dirty: Vec<bool>,
}

impl<'a> IncrementalEvaluator<'a> {
    pub fn new(schedule: &'a Schedule, times: &StageTimes) -> Result<Self, SimError> {
        let end = schedule.end_times(times)?;
        let dirty = vec![false; end.len()];
        Ok(IncrementalEvaluator { schedule, end, dirty })
    }

    pub fn end_times(&self) -> &[f64] {
        &self.end
    }

    /// `changed[i]` marks microbatches whose stage times differ from the last evaluation.
    pub fn update(&mut self, times: &StageTimes, changed: &[bool]) -> Result<&[f64], SimError> {
        self.schedule.check_shape(times)?;
        for (k, op) in self.schedule.ops.iter().enumerate() {
            let prev_dirty = op.prev != NONE && self.dirty[op.prev as usize];
            let dep_dirty = op.dep != NONE && self.dirty[op.dep as usize];
            let dirty = changed[op.microbatch as usize] || prev_dirty || dep_dirty;
            self.dirty[k] = dirty;
            if dirty {
                let prev = if op.prev == NONE { 0.0 } else { self.end[op.prev as usize] };
                let dep = if op.dep == NONE { 0.0 } else { self.end[op.dep as usize] };
                self.end[k] = prev.max(dep) + self.schedule.duration(op, times);
            }
        }
        Ok(&self.end)
    }
}
