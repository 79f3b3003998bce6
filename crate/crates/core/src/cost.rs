//! Time, communication, memory and utilization accounting.
//!
//! Module times come from a [`CostProfile`]: measured rows keyed by
//! `(module, tp)` and interpolated piecewise-linearly in token load. A module
//! without rows falls back to an analytic dense-transformer estimate when the
//! profile carries one. Everything downstream (planner, simulator, reorderer)
//! consumes times only through this module.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ClusterSpec, Microbatch, ModelSpec, ModuleKind, Plan, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Forward,
    Backward,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Forward => "forward",
            Phase::Backward => "backward",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("no profile rows or analytic fallback for {kind} at TP={tp}")]
    EmptyProfile { kind: ModuleKind, tp: u32 },
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("profile line {line}: {msg}")]
    Parse { line: u64, msg: String },
}

/// A query that fell outside the profiled token range and was clamped.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClampWarning {
    pub kind: ModuleKind,
    pub tp: u32,
    pub token_load: f64,
    pub clamped_to: f64,
}

impl fmt::Display for ClampWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} TP={} token load {} outside profiled range, clamped to {}",
            self.kind, self.tp, self.token_load, self.clamped_to
        )
    }
}

/// Per-stage forward and backward times of one microbatch, with clamp warnings.
pub type StageTimes = (Vec<f64>, Vec<f64>, Vec<ClampWarning>);

/// A time together with the clamp warning its lookup produced, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct Timed {
    pub seconds: f64,
    pub warning: Option<ClampWarning>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub token_load: f64,
    pub forward_s: f64,
    /// Missing backward times default to twice the forward time.
    pub backward_s: Option<f64>,
}

impl ProfileRow {
    fn backward(&self) -> f64 {
        self.backward_s.unwrap_or(2.0 * self.forward_s)
    }
}

/// Dense-transformer estimate used for modules without measured rows:
/// forward `2 * params * tokens` FLOPs, backward twice that.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticCost {
    pub peak_flops: f64,
    /// Fraction of peak achieved by the kernels, in (0, 1].
    pub efficiency: f64,
    /// Weight count per module in pipeline order.
    pub params: [f64; 3],
}

impl AnalyticCost {
    pub fn from_model(model: &ModelSpec, cluster: &ClusterSpec, efficiency: f64) -> Self {
        AnalyticCost {
            peak_flops: cluster.peak_flops,
            efficiency,
            params: ModuleKind::ALL.map(|k| model.module(k).arch.params()),
        }
    }

    fn forward(&self, kind: ModuleKind, tp: u32, token_load: f64) -> f64 {
        2.0 * self.params[kind.index()] * token_load / (self.peak_flops * self.efficiency * f64::from(tp))
    }
}

/// Measured or synthetic module times, keyed by module and TP size.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostProfile {
    tables: BTreeMap<(ModuleKind, u32), Vec<ProfileRow>>,
    analytic: Option<AnalyticCost>,
}

impl CostProfile {
    pub fn new() -> Self {
        CostProfile::default()
    }

    pub fn analytic(cost: AnalyticCost) -> Self {
        CostProfile { tables: BTreeMap::new(), analytic: Some(cost) }
    }

    pub fn with_analytic(mut self, cost: AnalyticCost) -> Self {
        self.analytic = Some(cost);
        self
    }

    /// Adds or replaces the rows for `(kind, tp)`; rows are sorted by token load.
    pub fn insert(&mut self, kind: ModuleKind, tp: u32, mut rows: Vec<ProfileRow>) -> Result<(), CostError> {
        rows.sort_by(|a, b| a.token_load.total_cmp(&b.token_load));
        for row in &rows {
            let bwd_ok = row.backward_s.is_none_or(|b| b > 0.0 && b.is_finite());
            if !(row.forward_s > 0.0 && row.forward_s.is_finite()) || !bwd_ok || !(row.token_load >= 0.0) {
                return Err(CostError::InvalidProfile(format!(
                    "{kind} TP={tp}: times must be positive and token loads non-negative"
                )));
            }
        }
        for pair in rows.windows(2) {
            if pair[0].token_load == pair[1].token_load {
                return Err(CostError::InvalidProfile(format!(
                    "{kind} TP={tp}: duplicate token load {}",
                    pair[0].token_load
                )));
            }
            if pair[1].forward_s < pair[0].forward_s || pair[1].backward() < pair[0].backward() {
                return Err(CostError::InvalidProfile(format!(
                    "{kind} TP={tp}: times must not decrease with token load"
                )));
            }
        }
        self.tables.insert((kind, tp), rows);
        Ok(())
    }

    /// Builds a profile from rows of the form `(kind, tp, token_load, fwd_s, bwd_s)`.
    pub fn from_rows(rows: &[(ModuleKind, u32, f64, f64, Option<f64>)]) -> Result<Self, CostError> {
        let mut grouped: BTreeMap<(ModuleKind, u32), Vec<ProfileRow>> = BTreeMap::new();
        for &(kind, tp, token_load, forward_s, backward_s) in rows {
            grouped.entry((kind, tp)).or_default().push(ProfileRow { token_load, forward_s, backward_s });
        }
        let mut profile = CostProfile::new();
        for ((kind, tp), rows) in grouped {
            profile.insert(kind, tp, rows)?;
        }
        Ok(profile)
    }

    /// Reads delimited rows `module,tp,token_load,fwd_s,bwd_s`. A header line
    /// is optional; an empty `bwd_s` field means "twice the forward time".
    pub fn from_csv<R: Read>(reader: R) -> Result<Self, CostError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .flexible(true)
            .from_reader(reader);
        let mut rows = Vec::new();
        for (idx, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| CostError::Parse {
                line: e.position().map_or(idx as u64 + 1, |p| p.line()),
                msg: e.to_string(),
            })?;
            let line = record.position().map_or(idx as u64 + 1, |p| p.line());
            if idx == 0 && record.get(1).is_some_and(|f| f.parse::<u32>().is_err()) {
                continue;
            }
            if record.len() < 4 || record.len() > 5 {
                return Err(CostError::Parse { line, msg: format!("expected 4 or 5 fields, found {}", record.len()) });
            }
            let err = |msg: String| CostError::Parse { line, msg };
            let kind: ModuleKind = record[0].parse().map_err(err)?;
            let tp = record[1].parse::<u32>().map_err(|e| err(format!("tp: {e}")))?;
            let load = record[2].parse::<f64>().map_err(|e| err(format!("token_load: {e}")))?;
            let fwd = record[3].parse::<f64>().map_err(|e| err(format!("fwd_s: {e}")))?;
            let bwd = match record.get(4) {
                Some(s) if !s.is_empty() => Some(s.parse::<f64>().map_err(|e| err(format!("bwd_s: {e}")))?),
                _ => None,
            };
            rows.push((kind, tp, load, fwd, bwd));
        }
        CostProfile::from_rows(&rows)
    }

    pub fn rows(&self, kind: ModuleKind, tp: u32) -> Option<&[ProfileRow]> {
        self.tables.get(&(kind, tp)).map(Vec::as_slice)
    }

    pub fn has_analytic_fallback(&self) -> bool {
        self.analytic.is_some()
    }

    /// True if any `(kind, tp)` query will be answered by the analytic fallback.
    pub fn uses_analytic(&self, kind: ModuleKind, tp: u32) -> bool {
        self.rows(kind, tp).is_none_or(<[_]>::is_empty) && self.analytic.is_some()
    }

    fn lookup(&self, kind: ModuleKind, tp: u32, token_load: f64, phase: Phase) -> Result<Timed, CostError> {
        if let Some(rows) = self.rows(kind, tp).filter(|r| !r.is_empty()) {
            let value = |r: &ProfileRow| match phase {
                Phase::Forward => r.forward_s,
                Phase::Backward => r.backward(),
            };
            return Ok(interpolate(rows, token_load, value, |clamped_to| ClampWarning {
                kind,
                tp,
                token_load,
                clamped_to,
            }));
        }
        let analytic = self.analytic.as_ref().ok_or(CostError::EmptyProfile { kind, tp })?;
        let fwd = analytic.forward(kind, tp, token_load);
        let seconds = match phase {
            Phase::Forward => fwd,
            Phase::Backward => 2.0 * fwd,
        };
        Ok(Timed { seconds, warning: None })
    }
}

fn interpolate(
    rows: &[ProfileRow],
    load: f64,
    value: impl Fn(&ProfileRow) -> f64,
    warn: impl Fn(f64) -> ClampWarning,
) -> Timed {
    let first = &rows[0];
    let last = &rows[rows.len() - 1];
    if rows.len() == 1 {
        return Timed { seconds: value(first), warning: None };
    }
    if load < first.token_load {
        return Timed { seconds: value(first), warning: Some(warn(first.token_load)) };
    }
    if load > last.token_load {
        return Timed { seconds: value(last), warning: Some(warn(last.token_load)) };
    }
    let hi = rows.partition_point(|r| r.token_load < load);
    let upper = &rows[hi];
    if upper.token_load == load || hi == 0 {
        return Timed { seconds: value(upper), warning: None };
    }
    let lower = &rows[hi - 1];
    let frac = (load - lower.token_load) / (upper.token_load - lower.token_load);
    Timed { seconds: value(lower) + frac * (value(upper) - value(lower)), warning: None }
}

/// Profile plus the model-level modifiers (frozen modules, boundary tensor sizes).
#[derive(Debug, Clone)]
pub struct CostModel {
    pub profile: CostProfile,
    pub model: ModelSpec,
    pub cluster: ClusterSpec,
}

impl CostModel {
    pub fn new(model: ModelSpec, cluster: ClusterSpec, profile: CostProfile) -> Self {
        CostModel { profile, model, cluster }
    }

    /// Whole-module forward time at the given TP size and token load. An
    /// encoder or generator with no modality tokens does no work.
    pub fn unit_forward_time(&self, kind: ModuleKind, tp: u32, token_load: f64) -> Result<Timed, CostError> {
        if kind != ModuleKind::Backbone && token_load <= 0.0 {
            return Ok(Timed { seconds: 0.0, warning: None });
        }
        self.profile.lookup(kind, tp, token_load, Phase::Forward)
    }

    /// Whole-module backward time; frozen modules pay only the configured fraction.
    pub fn unit_backward_time(&self, kind: ModuleKind, tp: u32, token_load: f64) -> Result<Timed, CostError> {
        if kind != ModuleKind::Backbone && token_load <= 0.0 {
            return Ok(Timed { seconds: 0.0, warning: None });
        }
        let mut t = self.profile.lookup(kind, tp, token_load, Phase::Backward)?;
        if self.model.module(kind).frozen {
            t.seconds *= self.model.frozen_backward_factor;
        }
        Ok(t)
    }

    pub fn unit_time(&self, kind: ModuleKind, tp: u32, token_load: f64, phase: Phase) -> Result<Timed, CostError> {
        match phase {
            Phase::Forward => self.unit_forward_time(kind, tp, token_load),
            Phase::Backward => self.unit_backward_time(kind, tp, token_load),
        }
    }

    /// Bytes crossing one pipeline boundary of `kind` for one microbatch slot.
    pub fn boundary_bytes(&self, kind: ModuleKind, plan: &Plan, token_load: f64) -> f64 {
        let hidden = f64::from(self.model.module(kind).arch.hidden);
        token_load * hidden * self.model.activation_element_bytes * plan.coupling(kind)
    }

    /// Per-stage per-microbatch time: coupled module time over the unit's PP
    /// size plus one boundary transfer.
    pub fn stage_time(&self, kind: ModuleKind, plan: &Plan, mb: &Microbatch, phase: Phase) -> Result<Timed, CostError> {
        let load = mb.token_load(kind, self.model.seq_len);
        self.stage_time_at_load(kind, plan, load, phase)
    }

    pub fn stage_time_at_load(&self, kind: ModuleKind, plan: &Plan, load: f64, phase: Phase) -> Result<Timed, CostError> {
        let c = plan.choice(kind);
        let mut t = self.unit_time(kind, c.tp, load, phase)?;
        let comm = pp_comm_time(plan, &self.cluster, self.boundary_bytes(kind, plan, load)).per_boundary;
        t.seconds = plan.coupling(kind) * t.seconds / f64::from(c.pp) + comm;
        Ok(t)
    }

    /// Per-stage times for one microbatch, in pipeline stage order.
    pub fn microbatch_stage_times(&self, plan: &Plan, mb: &Microbatch) -> Result<StageTimes, CostError> {
        let mut fwd = Vec::with_capacity(plan.total_stages() as usize);
        let mut bwd = Vec::with_capacity(fwd.capacity());
        let mut warnings = Vec::new();
        for kind in ModuleKind::ALL {
            let f = self.stage_time(kind, plan, mb, Phase::Forward)?;
            let b = self.stage_time(kind, plan, mb, Phase::Backward)?;
            warnings.extend(f.warning);
            warnings.extend(b.warning);
            for _ in 0..plan.choice(kind).pp {
                fwd.push(f.seconds);
                bwd.push(b.seconds);
            }
        }
        Ok((fwd, bwd, warnings))
    }

    /// Data-parallel gradient synchronisation, a per-iteration constant for
    /// fixed DP sizes: ring all-reduce of each GPU's gradient shard, with the
    /// three units synchronising concurrently.
    pub fn dp_sync_time(&self, plan: &Plan) -> f64 {
        ModuleKind::ALL
            .into_iter()
            .filter(|k| !self.model.module(*k).frozen)
            .map(|k| {
                let c = plan.choice(k);
                if c.dp <= 1 {
                    return 0.0;
                }
                let grad_bytes = self.model.module(k).memory.param_grad_bytes / 2.0 / f64::from(c.tp * c.pp);
                let dp = f64::from(c.dp);
                2.0 * (dp - 1.0) / dp * grad_bytes / dp_bandwidth(plan, &self.cluster)
            })
            .fold(0.0, f64::max)
    }
}

fn dp_bandwidth(plan: &Plan, cluster: &ClusterSpec) -> f64 {
    if plan.total_gpus() <= cluster.gpus_per_node {
        cluster.intra_node_bw
    } else {
        cluster.inter_node_bw
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CommTime {
    pub per_boundary: f64,
    /// Whole-pipeline cost: PP size times the single-boundary cost.
    pub pipeline: f64,
}

/// Pipeline-boundary transfer time. Traffic stays on the intra-node link only
/// when the whole plan fits in one node.
pub fn pp_comm_time(plan: &Plan, cluster: &ClusterSpec, layer_output_bytes: f64) -> CommTime {
    let per_boundary = if layer_output_bytes <= 0.0 {
        0.0
    } else {
        layer_output_bytes / dp_bandwidth(plan, cluster)
    };
    CommTime { per_boundary, pipeline: per_boundary * f64::from(plan.backbone.pp) }
}

/// Pipeline-boundary transfer time for a unit with the given PP size.
pub fn pipeline_comm_time(per_boundary: f64, pp: u32) -> f64 {
    per_boundary * f64::from(pp)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UnitMemory {
    pub kind: ModuleKind,
    pub bytes_per_gpu: f64,
    pub fits: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryReport {
    pub units: Vec<UnitMemory>,
    pub fits: bool,
}

/// Per-GPU bytes for one unit: replicated parameters and gradients, ZeRO-1
/// sharded optimizer state, and `pp` in-flight microbatches of activations at
/// the first stage.
pub fn unit_bytes_per_gpu(model: &ModelSpec, kind: ModuleKind, tp: u32, dp: u32, pp: u32) -> f64 {
    let mem = model.module(kind).memory;
    let gpus = f64::from(tp * dp * pp);
    let dp = f64::from(dp);
    dp * mem.param_grad_bytes / gpus + mem.optimizer_bytes / gpus + dp * mem.activation_bytes * f64::from(pp) / gpus
}

pub fn memory_check(plan: &Plan, model: &ModelSpec, cluster: &ClusterSpec) -> MemoryReport {
    let units: Vec<UnitMemory> = ModuleKind::ALL
        .into_iter()
        .map(|kind| {
            let c = plan.choice(kind);
            let bytes_per_gpu = unit_bytes_per_gpu(model, kind, c.tp, c.dp, c.pp);
            UnitMemory { kind, bytes_per_gpu, fits: bytes_per_gpu <= cluster.gpu_mem_bytes }
        })
        .collect();
    let fits = units.iter().all(|u| u.fits);
    MemoryReport { units, fits }
}

/// Smallest GPU count (a real number) satisfying the memory constraint for a
/// unit with the given TP and DP sizes, or `None` when no count suffices.
///
/// Per-GPU memory is `(dp*P + S)/g + dp*L*pp/g` with `pp = g/(tp*dp)`, so the
/// activation term is the constant `L/tp`.
pub fn memory_floor_gpus(model: &ModelSpec, cluster: &ClusterSpec, kind: ModuleKind, tp: u32, dp: u32) -> Option<f64> {
    let mem = model.module(kind).memory;
    let headroom = cluster.gpu_mem_bytes - mem.activation_bytes / f64::from(tp);
    if headroom <= 0.0 {
        return None;
    }
    Some((f64::from(dp) * mem.param_grad_bytes + mem.optimizer_bytes) / headroom)
}

/// Model FLOPs of one sample: attention-aware forward counts per context
/// (one backbone sequence, one context per modality subsequence), with the
/// backward pass at twice the forward, scaled for frozen modules.
pub fn sample_flops(model: &ModelSpec, sample: &Sample) -> f64 {
    let bwd_factor = |kind: ModuleKind| {
        if model.module(kind).frozen {
            2.0 * model.frozen_backward_factor
        } else {
            2.0
        }
    };
    let backbone = model.backbone.arch.forward_flops(f64::from(model.seq_len)) * (1.0 + bwd_factor(ModuleKind::Backbone));
    let mut total = backbone;
    for kind in [ModuleKind::Encoder, ModuleKind::Generator] {
        let arch = model.module(kind).arch;
        let fwd: f64 = sample.modality_subseqs().map(|n| arch.forward_flops(f64::from(n))).sum();
        total += fwd * (1.0 + bwd_factor(kind));
    }
    total
}

/// Fraction of aggregate peak FLOP/s spent on model FLOPs for one global batch.
pub fn mfu(plan: &Plan, model: &ModelSpec, cluster: &ClusterSpec, batch: &[Sample], iteration_time: f64) -> f64 {
    let flops: f64 = batch.iter().map(|s| sample_flops(model, s)).sum();
    mfu_from_flops(flops, plan.total_gpus(), cluster.peak_flops, iteration_time)
}

pub fn mfu_from_flops(flops: f64, gpus: u32, peak_flops: f64, iteration_time: f64) -> f64 {
    if iteration_time <= 0.0 || gpus == 0 {
        return 0.0;
    }
    flops / (iteration_time * peak_flops * f64::from(gpus))
}
