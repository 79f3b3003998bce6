//! Data reordering within one global batch.
//!
//! Two passes, both pure permutations of their input:
//!
//! * intra-microbatch: greedy multiway partition of samples across DP groups
//!   so that no group carries far more encoder/generator work than the rest;
//! * inter-microbatch: ordering of one DP group's microbatches along the
//!   pipeline so the idle windows on the first stage are filled with
//!   forwards of matching length.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{CostError, CostModel};
use crate::model::{Microbatch, ModuleKind, Plan, Sample};
use crate::sim::{schedule_intervals, IncrementalEvaluator, Schedule, SimError, StageTimes, Timeline};

#[derive(Debug, Error, PartialEq)]
pub enum ReorderError {
    #[error("asked for {k} microbatches but only {available} are pending")]
    KTooLarge { k: usize, available: usize },
    #[error("global batch has {found} samples, plan expects {expected}")]
    BatchSizeMismatch { expected: usize, found: usize },
    #[error("group count must be at least 1")]
    NoGroups,
    #[error("sizes and stage times disagree on the microbatch count")]
    LengthMismatch,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Cost(#[from] CostError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SortOrder {
    #[default]
    Ascending,
    Descending,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntraOutcome {
    /// Input indices, group by group.
    pub order: Vec<usize>,
    pub groups: Vec<Vec<usize>>,
    pub loads: Vec<f64>,
}

impl IntraOutcome {
    pub fn max_load(&self) -> f64 {
        self.loads.iter().copied().fold(0.0, f64::max)
    }
}

fn sorted_indices(sizes: &[f64], order: SortOrder) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..sizes.len()).collect();
    match order {
        SortOrder::Ascending => idx.sort_by(|&a, &b| sizes[a].total_cmp(&sizes[b]).then(a.cmp(&b))),
        SortOrder::Descending => idx.sort_by(|&a, &b| sizes[b].total_cmp(&sizes[a]).then(a.cmp(&b))),
    }
    idx
}

/// Greedy partition into `m` groups: sort by size, then give each sample to
/// the currently lightest group (lowest index on ties). With `capacity`, full
/// groups are skipped, which keeps group cardinalities equal when
/// `capacity * m == sizes.len()`. Groups are concatenated in index order.
pub fn intra_reorder_by(sizes: &[f64], m: usize, sort: SortOrder, capacity: Option<usize>) -> Result<IntraOutcome, ReorderError> {
    if m == 0 {
        return Err(ReorderError::NoGroups);
    }
    if let Some(cap) = capacity {
        if cap * m < sizes.len() {
            return Err(ReorderError::BatchSizeMismatch { expected: cap * m, found: sizes.len() });
        }
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); m];
    let mut loads = vec![0.0f64; m];
    for i in sorted_indices(sizes, sort) {
        let g = (0..m)
            .filter(|g| capacity.is_none_or(|cap| groups[*g].len() < cap))
            .min_by(|&a, &b| loads[a].total_cmp(&loads[b]).then(a.cmp(&b)))
            .expect("capacity leaves a free group");
        groups[g].push(i);
        loads[g] += sizes[i];
    }
    let order = groups.iter().flatten().copied().collect();
    Ok(IntraOutcome { order, groups, loads })
}

/// Reorders samples across `m` DP groups using the ascending greedy rule.
pub fn intra_reorder(samples: &[Sample], m: usize, size: impl Fn(&Sample) -> f64) -> Result<Vec<Sample>, ReorderError> {
    let sizes: Vec<f64> = samples.iter().map(size).collect();
    let out = intra_reorder_by(&sizes, m, SortOrder::Ascending, None)?;
    Ok(out.order.into_iter().map(|i| samples[i].clone()).collect())
}

/// Loads of `m` contiguous, equally sized groups of `order`.
pub fn contiguous_loads(sizes: &[f64], order: &[usize], m: usize) -> Vec<f64> {
    let per = order.len() / m.max(1);
    (0..m).map(|g| order[g * per..(g + 1) * per].iter().map(|&i| sizes[i]).sum()).collect()
}

/// Loads of a round-robin split (sample `i` to group `i mod m`).
pub fn round_robin_loads(sizes: &[f64], m: usize) -> Vec<f64> {
    let mut loads = vec![0.0; m];
    for (i, s) in sizes.iter().enumerate() {
        loads[i % m] += s;
    }
    loads
}

/// The `k` smallest pending items by `key`, smallest first; ties by index.
pub fn select_min(pending: &[usize], key: &[f64], k: usize) -> Result<Vec<usize>, ReorderError> {
    if k > pending.len() {
        return Err(ReorderError::KTooLarge { k, available: pending.len() });
    }
    let mut v = pending.to_vec();
    v.sort_by(|&a, &b| key[a].total_cmp(&key[b]).then(a.cmp(&b)));
    v.truncate(k);
    Ok(v)
}

/// Greedily picks `k` pending items whose keys sum close to `target`: each
/// pick minimises the remaining residual. Ties go to the smaller key, then
/// to the lower index. Returned in pick order.
pub fn select_closest(pending: &[usize], key: &[f64], k: usize, target: f64) -> Result<Vec<usize>, ReorderError> {
    if k > pending.len() {
        return Err(ReorderError::KTooLarge { k, available: pending.len() });
    }
    let mut left = pending.to_vec();
    let mut residual = target;
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let (pos, _) = left
            .iter()
            .enumerate()
            .min_by(|(_, &a), (_, &b)| {
                (residual - key[a])
                    .abs()
                    .total_cmp(&(residual - key[b]).abs())
                    .then(key[a].total_cmp(&key[b]))
                    .then(a.cmp(&b))
            })
            .expect("k <= pending");
        let pick = left.remove(pos);
        residual -= key[pick];
        out.push(pick);
    }
    Ok(out)
}

/// How the tail microbatches reserved for the pipeline drain are ordered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailOrder {
    /// Largest first, so the very last microbatch is the smallest.
    #[default]
    Descending,
    Ascending,
}

/// Quantity matched against window volumes when filling them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillKey {
    /// Forward time on the first pipeline stage, the work that actually
    /// occupies the window.
    #[default]
    FirstStage,
    /// The microbatch size key (encoder plus generator forward).
    Size,
}

/// How window volumes are recomputed between placements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalEval {
    /// Replays the whole schedule every time.
    #[default]
    Full,
    /// Replays only operations affected by the microbatches that changed.
    Incremental,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct InterOptions {
    pub tail: TailOrder,
    pub fill_key: FillKey,
    pub eval: IntervalEval,
}

/// Orders microbatches for plain 1F1B. `times` holds each microbatch's
/// per-stage times in input order and `size` its size key. Returns the
/// permutation: output position `j` holds input microbatch `order[j]`.
pub fn inter_reorder(times: &StageTimes, size: &[f64], options: &InterOptions) -> Result<Vec<usize>, ReorderError> {
    inter_reorder_vpp(times, size, 1, options)
}

/// Interleaved variant: windows come from the interleaved schedule, and each
/// position's target is its share of every window its forwards fill.
pub fn inter_reorder_vpp(times: &StageTimes, size: &[f64], vpp: usize, options: &InterOptions) -> Result<Vec<usize>, ReorderError> {
    let l = times.microbatches();
    let p = times.stages();
    if size.len() != l {
        return Err(ReorderError::LengthMismatch);
    }
    if l == 0 {
        return Ok(Vec::new());
    }
    let all: Vec<usize> = (0..l).collect();
    if l <= p {
        return select_min(&all, size, l);
    }
    let schedule = Schedule::build(p, l, vpp)?;
    let key: Vec<f64> = match options.fill_key {
        FillKey::FirstStage => (0..l).map(|i| times.fwd(i, 0)).collect(),
        FillKey::Size => size.to_vec(),
    };

    let first = select_min(&all, size, 1)?[0];
    let mut pending: Vec<usize> = all.iter().copied().filter(|&i| i != first).collect();
    let mut tail = select_min(&pending, size, p - 1)?;
    pending.retain(|i| !tail.contains(i));
    if options.tail == TailOrder::Descending {
        tail.reverse();
    }
    let mut builder = Builder::new(&schedule, times, vec![first], tail, options.eval)?;

    let head = (p - 1).min(pending.len());
    if head > 0 {
        let targets = builder.targets(&pending)?;
        let target: f64 = targets[1..=head].iter().sum();
        for pick in select_closest(&pending, &key, head, target)? {
            pending.retain(|&i| i != pick);
            builder.front.push(pick);
        }
    }
    while !pending.is_empty() {
        let targets = builder.targets(&pending)?;
        let position = builder.front.len();
        let pick = select_closest(&pending, &key, 1, targets[position])?[0];
        pending.retain(|&i| i != pick);
        builder.front.push(pick);
    }
    let mut order = builder.front;
    order.extend(builder.tail);
    Ok(order)
}

/// Working state for window computation over a partially built order.
struct Builder<'a> {
    schedule: &'a Schedule,
    times: &'a StageTimes,
    front: Vec<usize>,
    tail: Vec<usize>,
    work: StageTimes,
    eval: Option<IncrementalEvaluator<'a>>,
    end: Vec<f64>,
}

impl<'a> Builder<'a> {
    fn new(schedule: &'a Schedule, times: &'a StageTimes, front: Vec<usize>, tail: Vec<usize>, eval: IntervalEval) -> Result<Self, ReorderError> {
        let work = StageTimes::zeros(times.microbatches(), times.stages());
        let eval = match eval {
            IntervalEval::Full => None,
            IntervalEval::Incremental => Some(IncrementalEvaluator::new(schedule, &work)?),
        };
        Ok(Builder { schedule, times, front, tail, work, eval, end: Vec::new() })
    }

    /// Current order with unplaced positions filled by the mean of the
    /// pending microbatches; returns which positions changed.
    fn refresh(&mut self, pending: &[usize]) -> Vec<bool> {
        let l = self.times.microbatches();
        let stages = self.times.stages();
        let mut next = StageTimes::zeros(l, stages);
        for (j, &i) in self.front.iter().enumerate() {
            next.copy_row_from(j, self.times, i);
        }
        if !pending.is_empty() {
            let n = pending.len() as f64;
            for s in 0..stages {
                let f = pending.iter().map(|&i| self.times.fwd(i, s)).sum::<f64>() / n;
                let b = pending.iter().map(|&i| self.times.bwd(i, s)).sum::<f64>() / n;
                for j in self.front.len()..l - self.tail.len() {
                    next.set(j, s, f, b);
                }
            }
        }
        let offset = l - self.tail.len();
        for (j, &i) in self.tail.iter().enumerate() {
            next.copy_row_from(offset + j, self.times, i);
        }
        let changed = (0..l)
            .map(|j| next.fwd_row(j) != self.work.fwd_row(j) || next.bwd_row(j) != self.work.bwd_row(j))
            .collect();
        self.work = next;
        changed
    }

    /// Per-position fill targets: each window's volume split over the
    /// forwards filling it, in proportion to their durations.
    fn targets(&mut self, pending: &[usize]) -> Result<Vec<f64>, ReorderError> {
        let changed = self.refresh(pending);
        let end: &[f64] = match &mut self.eval {
            Some(inc) => inc.update(&self.work, &changed)?,
            None => {
                self.schedule.end_times_into(&self.work, &mut self.end)?;
                &self.end
            }
        };
        let windows = schedule_intervals(self.schedule, &self.work, end);
        let vpp = self.schedule.vpp() as f64;
        let mut targets = vec![0.0; self.times.microbatches()];
        for w in &windows.intervals {
            let n = w.filled_by.len();
            if n == 0 {
                continue;
            }
            for &mb in &w.filled_by {
                let share = if w.filled_time > 0.0 { self.work.fwd(mb, 0) / vpp / w.filled_time } else { 1.0 / n as f64 };
                targets[mb] += w.volume() * share;
            }
        }
        Ok(targets)
    }
}

/// Which reordering passes to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReorderMode {
    None,
    Intra,
    Inter,
    #[default]
    Both,
}

impl ReorderMode {
    pub fn intra(self) -> bool {
        matches!(self, ReorderMode::Intra | ReorderMode::Both)
    }

    pub fn inter(self) -> bool {
        matches!(self, ReorderMode::Inter | ReorderMode::Both)
    }
}

impl std::str::FromStr for ReorderMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(ReorderMode::None),
            "intra" => Ok(ReorderMode::Intra),
            "inter" => Ok(ReorderMode::Inter),
            "both" => Ok(ReorderMode::Both),
            other => Err(format!("unknown reorder mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ReorderOptions {
    pub mode: ReorderMode,
    pub intra_sort: SortOrder,
    pub inter: InterOptions,
}

/// Outcome of reordering one global batch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReorderReport {
    pub input_order: Vec<usize>,
    /// Sample indices lane by lane (DP group by DP group).
    pub output_order: Vec<usize>,
    pub lanes: Vec<Vec<usize>>,
    pub group_loads_before: Vec<f64>,
    pub group_loads_after: Vec<f64>,
    pub t_iter_before: f64,
    pub t_iter_after: f64,
}

/// Encoder plus generator forward seconds of one sample at the plan's TP sizes.
pub fn sample_size(cost: &CostModel, plan: &Plan, sample: &Sample) -> Result<f64, CostError> {
    let enc = cost.unit_forward_time(ModuleKind::Encoder, plan.encoder.tp, sample.encoder_tokens() as f64)?;
    let gen = cost.unit_forward_time(ModuleKind::Generator, plan.generator.tp, sample.generator_tokens() as f64)?;
    Ok(enc.seconds + gen.seconds)
}

/// Per-stage times of one DP lane, microbatch `j` being sample `lane[j]`.
pub fn lane_stage_times(cost: &CostModel, plan: &Plan, samples: &[Sample], lane: &[usize]) -> Result<StageTimes, ReorderError> {
    let mut t = StageTimes::zeros(lane.len(), plan.total_stages() as usize);
    for (j, &i) in lane.iter().enumerate() {
        let mb = Microbatch::single(i, samples[i].clone());
        let (f, b, _) = cost.microbatch_stage_times(plan, &mb)?;
        for s in 0..f.len() {
            t.set(j, s, f[s], b[s]);
        }
    }
    Ok(t)
}

/// Simulated iteration time of a set of lanes: the slowest lane.
pub fn simulate_lanes(cost: &CostModel, plan: &Plan, samples: &[Sample], lanes: &[Vec<usize>]) -> Result<f64, ReorderError> {
    let mut worst = 0.0f64;
    let mut schedule: Option<Schedule> = None;
    for lane in lanes {
        let t = lane_stage_times(cost, plan, samples, lane)?;
        let fits = schedule.as_ref().is_some_and(|s| s.microbatches() == lane.len());
        if !fits {
            schedule = Some(Schedule::build(t.stages(), t.microbatches(), plan.vpp as usize)?);
        }
        worst = worst.max(schedule.as_ref().unwrap().makespan(&t)?);
    }
    Ok(worst)
}

/// Timelines of every DP lane of one iteration.
#[derive(Debug, Clone)]
pub struct LaneRun {
    pub timelines: Vec<Timeline>,
    /// Makespan of the slowest lane.
    pub t_iter: f64,
    pub slowest: usize,
}

impl LaneRun {
    pub fn slowest_timeline(&self) -> &Timeline {
        &self.timelines[self.slowest]
    }
}

/// Like [`simulate_lanes`], keeping the full timeline of each lane.
pub fn simulate_lane_timelines(cost: &CostModel, plan: &Plan, samples: &[Sample], lanes: &[Vec<usize>]) -> Result<LaneRun, ReorderError> {
    let mut timelines = Vec::with_capacity(lanes.len());
    let mut schedule: Option<Schedule> = None;
    for lane in lanes {
        let t = lane_stage_times(cost, plan, samples, lane)?;
        let fits = schedule.as_ref().is_some_and(|s| s.microbatches() == lane.len());
        if !fits {
            schedule = Some(Schedule::build(t.stages(), t.microbatches(), plan.vpp as usize)?);
        }
        timelines.push(Timeline::from_schedule(schedule.as_ref().unwrap(), &t)?);
    }
    let mut slowest = 0;
    for (i, tl) in timelines.iter().enumerate() {
        if tl.iteration_time > timelines[slowest].iteration_time {
            slowest = i;
        }
    }
    let t_iter = timelines.get(slowest).map_or(0.0, |t| t.iteration_time);
    Ok(LaneRun { timelines, t_iter, slowest })
}

/// Intra-microbatch reordering across the plan's backbone DP groups, then
/// inter-microbatch reordering inside each group.
pub fn disaggregated_reorder(cost: &CostModel, plan: &Plan, samples: &[Sample], options: &ReorderOptions) -> Result<ReorderReport, ReorderError> {
    let bs = plan.global_batch as usize;
    if samples.len() != bs {
        return Err(ReorderError::BatchSizeMismatch { expected: bs, found: samples.len() });
    }
    let m = plan.backbone.dp as usize;
    let per = bs / m;
    let sizes: Vec<f64> = samples.iter().map(|s| sample_size(cost, plan, s)).collect::<Result<_, _>>()?;
    let input_order: Vec<usize> = (0..bs).collect();
    let before: Vec<Vec<usize>> = input_order.chunks(per).map(<[usize]>::to_vec).collect();

    let mut lanes = if options.mode.intra() {
        intra_reorder_by(&sizes, m, options.intra_sort, Some(per))?.groups
    } else {
        before.clone()
    };
    if options.mode.inter() {
        for lane in &mut lanes {
            let t = lane_stage_times(cost, plan, samples, lane)?;
            let lane_sizes: Vec<f64> = lane.iter().map(|&i| sizes[i]).collect();
            let order = inter_reorder_vpp(&t, &lane_sizes, plan.vpp as usize, &options.inter)?;
            *lane = order.into_iter().map(|j| lane[j]).collect();
        }
    }
    let load = |groups: &[Vec<usize>]| groups.iter().map(|g| g.iter().map(|&i| sizes[i]).sum()).collect();
    Ok(ReorderReport {
        group_loads_before: load(&before),
        group_loads_after: load(&lanes),
        t_iter_before: simulate_lanes(cost, plan, samples, &before)?,
        t_iter_after: simulate_lanes(cost, plan, samples, &lanes)?,
        output_order: lanes.iter().flatten().copied().collect(),
        input_order,
        lanes,
    })
}
