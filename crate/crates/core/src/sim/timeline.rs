use serde::Serialize;

use crate::cost::Phase;

use super::{Schedule, SimError, StageTimes};

/// One executed operation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Event {
    pub device: usize,
    pub microbatch: usize,
    /// Virtual stage; equals the device index for plain 1F1B.
    pub stage: usize,
    pub phase: Phase,
    pub start: f64,
    pub end: f64,
}

/// Result of replaying a schedule: events ordered by `(start, device,
/// microbatch)`, the makespan, and each device's idle gaps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timeline {
    pub devices: usize,
    pub microbatches: usize,
    pub vpp: usize,
    pub events: Vec<Event>,
    pub iteration_time: f64,
    /// Per device, the `(start, end)` gaps in `[0, iteration_time]` with no work.
    pub idle: Vec<Vec<(f64, f64)>>,
}

impl Timeline {
    pub fn from_schedule(schedule: &Schedule, times: &StageTimes) -> Result<Timeline, SimError> {
        let end = schedule.end_times(times)?;
        let mut events: Vec<Event> = schedule
            .ops()
            .iter()
            .zip(&end)
            .map(|(op, &end)| Event {
                device: op.device as usize,
                microbatch: op.microbatch as usize,
                stage: op.stage as usize,
                phase: op.phase,
                start: end - schedule.duration(op, times),
                end,
            })
            .collect();
        // Starts are recomputed as `end - duration`; snap them to the exact
        // predecessor end so zero-width gaps do not appear from rounding.
        for (k, op) in schedule.ops().iter().enumerate() {
            let prev = op.prev().map_or(0.0, |j| end[j]);
            let dep = op.dep().map_or(0.0, |j| end[j]);
            events[k].start = prev.max(dep);
        }
        events.sort_by(|a, b| {
            a.start
                .total_cmp(&b.start)
                .then(a.device.cmp(&b.device))
                .then(a.microbatch.cmp(&b.microbatch))
                .then(a.stage.cmp(&b.stage))
                .then((a.phase as u8).cmp(&(b.phase as u8)))
        });
        let iteration_time = end.iter().copied().fold(0.0, f64::max);
        let devices = schedule.devices();
        let mut idle = vec![Vec::new(); devices];
        let mut cursor = vec![0.0f64; devices];
        for e in &events {
            if e.start > cursor[e.device] {
                idle[e.device].push((cursor[e.device], e.start));
            }
            cursor[e.device] = cursor[e.device].max(e.end);
        }
        for (d, c) in cursor.into_iter().enumerate() {
            if c < iteration_time {
                idle[d].push((c, iteration_time));
            }
        }
        Ok(Timeline {
            devices,
            microbatches: schedule.microbatches(),
            vpp: schedule.vpp(),
            events,
            iteration_time,
            idle,
        })
    }

    /// Events of one device in execution order.
    pub fn device_events(&self, device: usize) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(move |e| e.device == device)
    }

    pub fn busy_time(&self, device: usize) -> f64 {
        self.device_events(device).map(|e| e.end - e.start).sum()
    }

    pub fn idle_time(&self, device: usize) -> f64 {
        self.idle[device].iter().map(|(a, b)| b - a).sum()
    }

    pub fn find(&self, microbatch: usize, stage: usize, phase: Phase) -> Option<&Event> {
        self.events.iter().find(|e| e.microbatch == microbatch && e.stage == stage && e.phase == phase)
    }

    /// Checks the structural invariants: per-device events do not overlap,
    /// every event has `end >= start`, and each event starts after its
    /// upstream dependency ends.
    pub fn check_invariants(&self) -> Result<(), String> {
        let stages = self.devices * self.vpp;
        for e in &self.events {
            if !(e.end >= e.start) {
                return Err(format!("event {e:?} ends before it starts"));
            }
        }
        for d in 0..self.devices {
            let mut last_end = 0.0f64;
            for e in self.device_events(d) {
                if e.start < last_end {
                    return Err(format!("device {d}: event {e:?} overlaps previous work ending at {last_end}"));
                }
                last_end = e.end;
            }
        }
        for e in &self.events {
            let dep = match e.phase {
                Phase::Forward if e.stage == 0 => None,
                Phase::Forward => self.find(e.microbatch, e.stage - 1, Phase::Forward),
                Phase::Backward if e.stage + 1 == stages => self.find(e.microbatch, e.stage, Phase::Forward),
                Phase::Backward => self.find(e.microbatch, e.stage + 1, Phase::Backward),
            };
            if let Some(dep) = dep {
                if e.start < dep.end {
                    return Err(format!("event {e:?} starts before its dependency {dep:?} ends"));
                }
            }
        }
        let max_end = self.events.iter().map(|e| e.end).fold(0.0, f64::max);
        if max_end != self.iteration_time {
            return Err(format!("iteration time {} differs from last event end {max_end}", self.iteration_time));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationStats {
    pub iteration_time: f64,
    /// Total idle time over `devices * iteration_time`.
    pub bubble_fraction: f64,
    pub idle_per_device: Vec<f64>,
    /// Time until the first microbatch has completed its full forward and
    /// backward traversal (its last backward on device 0).
    pub warmup: f64,
    /// Remainder of the iteration after the warm-up.
    pub steady: f64,
    /// Idle time on device 0: pipeline fill and drain overhead.
    pub first_device_idle: f64,
}

pub fn iteration_stats(timeline: &Timeline) -> IterationStats {
    let idle_per_device: Vec<f64> = (0..timeline.devices).map(|d| timeline.idle_time(d)).collect();
    let total_idle: f64 = idle_per_device.iter().sum();
    let t = timeline.iteration_time;
    let bubble_fraction = if t > 0.0 { total_idle / (timeline.devices as f64 * t) } else { 0.0 };
    let warmup = timeline.find(0, 0, Phase::Backward).map_or(t, |e| e.end);
    IterationStats {
        iteration_time: t,
        bubble_fraction,
        first_device_idle: idle_per_device.first().copied().unwrap_or(0.0),
        idle_per_device,
        warmup,
        steady: t - warmup,
    }
}

#[cfg(test)]
mod tests {
    use super::super::{schedule_1f1b, schedule_interleaved};
    use super::*;

    #[test]
    fn bubble_fraction_closed_form() {
        let tl = schedule_1f1b(&StageTimes::homogeneous(4, 4, 1.0, 2.0)).unwrap();
        let s = iteration_stats(&tl);
        assert!((s.bubble_fraction - 3.0 / 7.0).abs() < 1e-12);
        let tl = schedule_1f1b(&StageTimes::homogeneous(5, 1, 1.0, 2.0)).unwrap();
        assert_eq!(iteration_stats(&tl).bubble_fraction, 0.0);
        // l = 1: each device is busy (tf + tb) out of p (tf + tb).
        let tl = schedule_1f1b(&StageTimes::homogeneous(1, 4, 1.0, 2.0)).unwrap();
        assert!((iteration_stats(&tl).bubble_fraction - 3.0 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn warmup_and_steady_for_homogeneous() {
        let tl = schedule_1f1b(&StageTimes::homogeneous(6, 3, 1.0, 2.0)).unwrap();
        let s = iteration_stats(&tl);
        assert_eq!(s.warmup, 9.0);
        assert_eq!(s.steady, 15.0);
    }

    #[test]
    fn vpp_halves_fill_overhead() {
        let t = StageTimes::homogeneous(8, 4, 1.0, 2.0);
        let one = iteration_stats(&schedule_interleaved(&t, 1).unwrap());
        let two = iteration_stats(&schedule_interleaved(&t, 2).unwrap());
        assert!((two.first_device_idle * 2.0 - one.first_device_idle).abs() < 1e-9);
        assert!((one.first_device_idle - 9.0).abs() < 1e-9);
    }

    #[test]
    fn invariants_and_work_conservation() {
        let mut t = StageTimes::homogeneous(6, 4, 1.0, 2.0);
        t.set(3, 0, 5.0, 0.5);
        t.set(1, 2, 0.0, 0.0);
        let tl = schedule_1f1b(&t).unwrap();
        tl.check_invariants().unwrap();
        let want: f64 = (0..6).map(|i| t.fwd(i, 0) + t.bwd(i, 0)).sum();
        assert!((tl.busy_time(0) - want).abs() < 1e-12);
        assert!((tl.busy_time(0) + tl.idle_time(0) - tl.iteration_time).abs() < 1e-9);
    }
}
