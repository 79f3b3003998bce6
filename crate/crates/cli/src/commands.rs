use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use mmplan_core::cost::{memory_check, mfu, CostModel, MemoryReport};
use mmplan_core::model::{validate_plan, ModuleKind, Plan, Sample};
use mmplan_core::orchestrator::{
    model_orchestration, predict_times, rigid_baseline_with, CandidateResult, RigidSettings, OrchestratorError, PlanRequest, PlanningLoad, Prediction,
};
use mmplan_core::par::Execution;
use mmplan_core::reorder::{disaggregated_reorder, simulate_lane_timelines, ReorderError, ReorderMode, ReorderOptions, SortOrder};
use mmplan_core::sim::{iteration_stats, write_trace, SimError, Timeline};
use mmplan_core::workload::{synth_batch, token_totals, write_samples, TokenTotals, WorkloadSpec};
use serde::Serialize;
use serde_json::Value;

use crate::config::{sha256_hex, Setup, Workload};
use crate::report::{finalize, ratio, render, table, RunInfo};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "mmplan", version, about = "Plan, simulate and reorder disaggregated multimodal LLM training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Choose GPU allocation and parallelism sizes for each module.
    Plan(PlanArgs),
    /// Simulate one iteration of a plan on a workload.
    Simulate(SimulateArgs),
    /// Reorder a global batch and emit the sample permutation.
    Reorder(SimulateArgs),
    /// Compare the optimized plan against the rigid baseline in simulation.
    Compare(CompareArgs),
    /// Draw a synthetic batch and write it as a trace.
    Generate(GenerateArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Model TOML file.
    #[arg(long)]
    pub model: PathBuf,
    /// Cluster TOML file.
    #[arg(long)]
    pub cluster: PathBuf,
    /// Seed for synthetic workloads; overrides the workload file's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also print a human-readable summary table to stderr.
    #[arg(long)]
    pub table: bool,
    /// Evaluate planner candidates on one thread.
    #[arg(long)]
    pub sequential: bool,
}

/// Pins for the rigid baseline; unset values are tuned.
#[derive(Debug, Args)]
pub struct BaselineArgs {
    /// Shared TP size of the rigid baseline.
    #[arg(long)]
    pub baseline_tp: Option<u32>,
    /// Backbone pipeline depth of the rigid baseline.
    #[arg(long)]
    pub baseline_pp: Option<u32>,
}

impl BaselineArgs {
    fn settings(&self) -> RigidSettings {
        RigidSettings { tp: self.baseline_tp, backbone_pp: self.baseline_pp }
    }
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub baseline: BaselineArgs,
    /// Global batch size.
    #[arg(long)]
    pub bs: u32,
    #[arg(long, default_value_t = 1)]
    pub vpp: u32,
    /// Workload (trace `.jsonl` or synthetic TOML) whose mean token loads drive
    /// the prediction; the default synthetic spec is used when absent.
    #[arg(long)]
    pub workload: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Plan file: a `plan` report or a bare plan object.
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long)]
    pub workload: PathBuf,
    /// Overrides the plan's batch size (must match it).
    #[arg(long)]
    pub bs: Option<u32>,
    /// Overrides the plan's virtual pipeline size.
    #[arg(long)]
    pub vpp: Option<u32>,
    #[arg(long, default_value = "both")]
    pub reorder: ReorderMode,
    /// Sort order of the intra-microbatch pass.
    #[arg(long, value_parser = parse_sort, default_value = "ascending")]
    pub intra_sort: SortOrder,
    /// Write the reordered iteration as trace-event JSON.
    #[arg(long)]
    pub emit_trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub baseline: BaselineArgs,
    #[arg(long)]
    pub workload: PathBuf,
    #[arg(long)]
    pub bs: u32,
    #[arg(long, default_value_t = 1)]
    pub vpp: u32,
    #[arg(long, default_value = "both")]
    pub reorder: ReorderMode,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Synthetic workload TOML.
    #[arg(long)]
    pub workload: PathBuf,
    #[arg(long)]
    pub bs: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Trace path.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_sort(s: &str) -> Result<SortOrder, String> {
    match s {
        "ascending" => Ok(SortOrder::Ascending),
        "descending" => Ok(SortOrder::Descending),
        other => Err(format!("unknown sort order `{other}`")),
    }
}

/// What a command produced: the report plus an optional text summary.
pub struct Output {
    pub report: Value,
    pub table: Option<String>,
}

pub fn run(command: &Command) -> Result<Output, CliError> {
    match command {
        Command::Plan(a) => plan(a),
        Command::Simulate(a) => simulate(a, false),
        Command::Reorder(a) => simulate(a, true),
        Command::Compare(a) => compare(a),
        Command::Generate(a) => generate(a),
    }
}

/// Writes the report where the command asked for it.
pub fn emit(command: &Command, output: &Output) -> Result<(), CliError> {
    let out = match command {
        Command::Plan(a) => a.common.out.as_deref(),
        Command::Simulate(a) | Command::Reorder(a) => a.common.out.as_deref(),
        Command::Compare(a) => a.common.out.as_deref(),
        Command::Generate(_) => None,
    };
    let text = render(&output.report);
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?,
        None => std::io::stdout().write_all(text.as_bytes()).map_err(|e| CliError::Internal(e.to_string()))?,
    }
    if let Some(t) = &output.table {
        eprint!("{t}");
    }
    Ok(())
}

#[derive(Serialize)]
struct Inputs {
    model_sha256: String,
    cluster_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    workload_sha256: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    plan_sha256: Option<String>,
    seed: Option<u64>,
    global_batch: u32,
    vpp: u32,
}

fn execution(common: &Common) -> Execution {
    if common.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn mean_load(samples: &[Sample]) -> PlanningLoad {
    let n = samples.len().max(1) as f64;
    PlanningLoad {
        encoder_tokens: samples.iter().map(|s| s.encoder_tokens() as f64).sum::<f64>() / n,
        generator_tokens: samples.iter().map(|s| s.generator_tokens() as f64).sum::<f64>() / n,
    }
}

fn orchestrator_error(e: OrchestratorError) -> CliError {
    match e {
        OrchestratorError::Cost(c) => CliError::Config(c.to_string()),
        other => CliError::Infeasible(other.to_string()),
    }
}

fn reorder_error(e: ReorderError) -> CliError {
    match e {
        ReorderError::BatchSizeMismatch { .. } | ReorderError::Cost(_) => CliError::Config(e.to_string()),
        ReorderError::Sim(SimError::IndivisibleVppAssignment { .. }) => CliError::Config(e.to_string()),
        other => CliError::Internal(other.to_string()),
    }
}

/// Clamp warnings the planner's lookups would produce at `load`.
fn planning_warnings(cost: &CostModel, load: &PlanningLoad) -> Vec<String> {
    let mut out = Vec::new();
    for kind in ModuleKind::ALL {
        let tokens = load.tokens(kind, cost.model.seq_len);
        for tp in cost.cluster.tp_choices() {
            if let Ok(t) = cost.unit_forward_time(kind, tp, tokens) {
                out.extend(t.warning.map(|w| w.to_string()));
            }
        }
    }
    out
}

#[derive(Serialize)]
struct PlannedUnit {
    plan: Plan,
    prediction: Prediction,
    memory: MemoryReport,
}

impl PlannedUnit {
    fn of(c: &CandidateResult, cost: &CostModel) -> Option<Self> {
        let plan = c.plan.clone()?;
        let prediction = c.prediction?;
        let memory = memory_check(&plan, &cost.model, &cost.cluster);
        Some(PlannedUnit { plan, prediction, memory })
    }
}

#[derive(Serialize)]
struct PlanReport {
    command: &'static str,
    inputs: Inputs,
    planning_load: PlanningLoad,
    analytic_modules: Vec<ModuleKind>,
    warnings: Vec<String>,
    chosen: PlannedUnit,
    baseline: Option<PlannedUnit>,
    baseline_settings: RigidSettings,
    baseline_error: Option<String>,
    /// Baseline predicted time over chosen predicted time.
    predicted_speedup: Option<f64>,
    candidate_count: usize,
    candidates: Vec<CandidateResult>,
}

fn plan(a: &PlanArgs) -> Result<Output, CliError> {
    let started = Instant::now();
    let setup = Setup::load(&a.common.model, &a.common.cluster)?;
    let seq_len = setup.seq_len();
    let bs = a.bs as usize;
    let (samples, workload_sha256, seed) = match &a.workload {
        Some(path) => {
            let w = Workload::load(path, bs, a.common.seed, seq_len)?;
            (w.samples, Some(w.sha256), w.seed)
        }
        None => {
            let spec = WorkloadSpec { seq_len, seed: a.common.seed.unwrap_or(0), ..Default::default() };
            let samples = synth_batch(&spec, bs).map_err(|e| CliError::Config(e.to_string()))?;
            (samples, None, Some(spec.seed))
        }
    };
    let load = mean_load(&samples);
    let request = PlanRequest::new(a.bs, load).with_vpp(a.vpp).with_execution(execution(&a.common));

    let solve = Instant::now();
    let orch = model_orchestration(&setup.cost, &request).map_err(orchestrator_error)?;
    let solve_seconds = solve.elapsed().as_secs_f64();
    let chosen = PlannedUnit::of(&orch.best, &setup.cost).ok_or_else(|| CliError::Internal("best candidate has no plan".into()))?;
    validate_plan(&chosen.plan, &setup.cost.cluster, &setup.cost.model)
        .map_err(|v| CliError::Internal(format!("chosen plan fails validation: {v:?}")))?;
    let (baseline, baseline_error) = match rigid_baseline_with(&setup.cost, &request, &a.baseline.settings()) {
        Ok(c) => (PlannedUnit::of(&c, &setup.cost), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let predicted_speedup = baseline.as_ref().map(|b| ratio(b.prediction.t_iter, chosen.prediction.t_iter));

    let summary = {
        let mut rows = vec![row("chosen", &chosen.plan, chosen.prediction.t_iter)];
        if let Some(b) = &baseline {
            rows.push(row("rigid", &b.plan, b.prediction.t_iter));
        }
        table(&["plan", "gpus (enc/bb/gen)", "tp,dp,pp enc", "tp,dp,pp bb", "tp,dp,pp gen", "t_iter_s"], &rows)
    };
    let report = PlanReport {
        command: "plan",
        inputs: Inputs {
            model_sha256: setup.model_sha256.clone(),
            cluster_sha256: setup.cluster_sha256.clone(),
            workload_sha256,
            plan_sha256: None,
            seed,
            global_batch: a.bs,
            vpp: a.vpp,
        },
        planning_load: load,
        analytic_modules: setup.analytic_modules.clone(),
        warnings: planning_warnings(&setup.cost, &load),
        chosen,
        baseline,
        baseline_settings: a.baseline.settings(),
        baseline_error,
        predicted_speedup,
        candidate_count: orch.candidates.len(),
        candidates: orch.candidates,
    };
    let run = RunInfo::new(started.elapsed().as_secs_f64(), Some(solve_seconds));
    Ok(Output { report: finalize(report, run)?, table: a.common.table.then_some(summary) })
}

fn row(name: &str, p: &Plan, t: f64) -> Vec<String> {
    let c = |k: ModuleKind| {
        let c = p.choice(k);
        format!("{},{},{}", c.tp, c.dp, c.pp)
    };
    vec![
        name.to_string(),
        format!("{}/{}/{}", p.alloc.encoder, p.alloc.backbone, p.alloc.generator),
        c(ModuleKind::Encoder),
        c(ModuleKind::Backbone),
        c(ModuleKind::Generator),
        format!("{t:.6}"),
    ]
}

/// One simulated ordering of a global batch.
#[derive(Debug, Clone, Serialize)]
pub struct OrderingStats {
    pub t_iter: f64,
    pub mfu: f64,
    /// Of the slowest DP lane.
    pub bubble_fraction: f64,
    pub warmup: f64,
    pub steady: f64,
    pub group_loads: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Simulation {
    pub reorder: ReorderMode,
    pub identity: OrderingStats,
    pub reordered: OrderingStats,
    /// `reordered.t_iter / identity.t_iter`.
    pub ratio: f64,
    /// Gradient synchronisation, reported apart from `t_iter`.
    pub dp_sync_seconds: f64,
    pub predicted: Prediction,
    /// Sample indices per DP lane, in execution order.
    pub lanes: Vec<Vec<usize>>,
    #[serde(skip)]
    pub timelines: Vec<Timeline>,
}

fn stats(cost: &CostModel, plan: &Plan, samples: &[Sample], lanes: &[Vec<usize>], loads: Vec<f64>) -> Result<(OrderingStats, Vec<Timeline>), CliError> {
    let run = simulate_lane_timelines(cost, plan, samples, lanes).map_err(reorder_error)?;
    for tl in &run.timelines {
        tl.check_invariants().map_err(CliError::Internal)?;
    }
    let s = iteration_stats(run.slowest_timeline());
    let out = OrderingStats {
        t_iter: run.t_iter,
        mfu: mfu(plan, &cost.model, &cost.cluster, samples, run.t_iter),
        bubble_fraction: s.bubble_fraction,
        warmup: s.warmup,
        steady: s.steady,
        group_loads: loads,
    };
    Ok((out, run.timelines))
}

/// Simulates `plan` on `samples` in identity order and after reordering.
pub fn simulate_plan(cost: &CostModel, plan: &Plan, samples: &[Sample], options: &ReorderOptions) -> Result<Simulation, CliError> {
    let rep = disaggregated_reorder(cost, plan, samples, options).map_err(reorder_error)?;
    let mut seen = rep.output_order.clone();
    seen.sort_unstable();
    if seen != rep.input_order {
        return Err(CliError::Internal("reordering did not produce a permutation".into()));
    }
    let per = samples.len() / plan.backbone.dp as usize;
    let before: Vec<Vec<usize>> = rep.input_order.chunks(per).map(<[usize]>::to_vec).collect();
    let (identity, _) = stats(cost, plan, samples, &before, rep.group_loads_before.clone())?;
    let (reordered, timelines) = stats(cost, plan, samples, &rep.lanes, rep.group_loads_after.clone())?;
    let predicted = predict_times(plan, cost, &mean_load(samples)).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(Simulation {
        reorder: options.mode,
        ratio: ratio(reordered.t_iter, identity.t_iter),
        identity,
        reordered,
        dp_sync_seconds: cost.dp_sync_time(plan),
        predicted,
        lanes: rep.lanes,
        timelines,
    })
}

fn read_plan(path: &Path) -> Result<(Plan, String), CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let value: Value = serde_json::from_slice(&bytes).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let node = value.pointer("/chosen/plan").cloned().unwrap_or(value);
    let plan: Plan = serde_json::from_value(node).map_err(|e| CliError::Config(format!("{}: not a plan: {e}", path.display())))?;
    Ok((plan, sha256_hex(&bytes)))
}

#[derive(Serialize)]
struct SimulateReport {
    command: &'static str,
    inputs: Inputs,
    plan: Plan,
    token_totals: TokenTotals,
    simulation: Simulation,
    #[serde(skip_serializing_if = "Option::is_none")]
    trace_sha256: Option<String>,
}

#[derive(Serialize)]
struct ReorderReportOut {
    command: &'static str,
    inputs: Inputs,
    plan: Plan,
    reorder: ReorderMode,
    /// Sample indices in the new order, lane after lane.
    permutation: Vec<usize>,
    lanes: Vec<Vec<usize>>,
    group_loads_before: Vec<f64>,
    group_loads_after: Vec<f64>,
    t_iter_before: f64,
    t_iter_after: f64,
    /// `t_iter_after / t_iter_before`.
    ratio: f64,
}

fn simulate(a: &SimulateArgs, reorder_only: bool) -> Result<Output, CliError> {
    let started = Instant::now();
    let setup = Setup::load(&a.common.model, &a.common.cluster)?;
    let (mut plan, plan_sha256) = read_plan(&a.plan)?;
    if let Some(v) = a.vpp {
        plan.vpp = v;
    }
    if let Some(bs) = a.bs {
        if bs != plan.global_batch {
            return Err(CliError::Config(format!("--bs {bs} does not match the plan's batch size {}", plan.global_batch)));
        }
    }
    validate_plan(&plan, &setup.cost.cluster, &setup.cost.model).map_err(|v| {
        CliError::Infeasible(v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))
    })?;
    let w = Workload::load(&a.workload, plan.global_batch as usize, a.common.seed, setup.seq_len())?;
    let inputs = Inputs {
        model_sha256: setup.model_sha256.clone(),
        cluster_sha256: setup.cluster_sha256.clone(),
        workload_sha256: Some(w.sha256.clone()),
        plan_sha256: Some(plan_sha256),
        seed: w.seed,
        global_batch: plan.global_batch,
        vpp: plan.vpp,
    };
    let options = ReorderOptions { mode: a.reorder, intra_sort: a.intra_sort, ..Default::default() };

    if reorder_only {
        let rep = disaggregated_reorder(&setup.cost, &plan, &w.samples, &options).map_err(reorder_error)?;
        let report = ReorderReportOut {
            command: "reorder",
            inputs,
            plan,
            reorder: a.reorder,
            ratio: ratio(rep.t_iter_after, rep.t_iter_before),
            permutation: rep.output_order,
            lanes: rep.lanes,
            group_loads_before: rep.group_loads_before,
            group_loads_after: rep.group_loads_after,
            t_iter_before: rep.t_iter_before,
            t_iter_after: rep.t_iter_after,
        };
        let run = RunInfo::new(started.elapsed().as_secs_f64(), None);
        return Ok(Output { report: finalize(report, run)?, table: None });
    }

    let sim = simulate_plan(&setup.cost, &plan, &w.samples, &options)?;
    let trace_sha256 = match &a.emit_trace {
        Some(path) => {
            let mut buf = Vec::new();
            write_trace(&mut buf, &sim.timelines).map_err(|e| CliError::Internal(e.to_string()))?;
            std::fs::write(path, &buf).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            Some(sha256_hex(&buf))
        }
        None => None,
    };
    let summary = table(
        &["order", "t_iter_s", "mfu", "bubble"],
        &[("identity", &sim.identity), ("reordered", &sim.reordered)]
            .map(|(n, s)| vec![n.to_string(), format!("{:.6}", s.t_iter), format!("{:.4}", s.mfu), format!("{:.4}", s.bubble_fraction)]),
    );
    let report = SimulateReport {
        command: "simulate",
        inputs,
        token_totals: token_totals(&w.samples, setup.seq_len()),
        plan,
        simulation: sim,
        trace_sha256,
    };
    let run = RunInfo::new(started.elapsed().as_secs_f64(), None);
    Ok(Output { report: finalize(report, run)?, table: a.common.table.then_some(summary) })
}

#[derive(Serialize)]
struct CompareSide {
    plan: Plan,
    predicted: Prediction,
    simulation: Simulation,
}

#[derive(Serialize)]
struct CompareReport {
    command: &'static str,
    inputs: Inputs,
    optimized: CompareSide,
    baseline: CompareSide,
    baseline_settings: RigidSettings,
    /// `baseline.simulation.identity.t_iter / optimized.simulation.reordered.t_iter`.
    speedup: f64,
    /// `baseline.simulation.identity.t_iter / optimized.simulation.identity.t_iter`.
    speedup_without_reorder: f64,
    /// `baseline.predicted.t_iter / optimized.predicted.t_iter`.
    predicted_speedup: f64,
}

/// Plans with the optimizer and the rigid baseline and simulates both on the
/// same batch; the baseline keeps the input order.
fn compare_on(
    cost: &CostModel,
    request: &PlanRequest,
    rigid: &RigidSettings,
    samples: &[Sample],
    mode: ReorderMode,
    inputs: Inputs,
) -> Result<CompareReport, CliError> {
    let orch = model_orchestration(cost, request).map_err(orchestrator_error)?;
    let base = rigid_baseline_with(cost, request, rigid).map_err(orchestrator_error)?;
    let side = |c: &CandidateResult, mode: ReorderMode| -> Result<CompareSide, CliError> {
        let plan = c.plan.clone().ok_or_else(|| CliError::Internal("candidate without plan".into()))?;
        let options = ReorderOptions { mode, ..Default::default() };
        Ok(CompareSide {
            predicted: c.prediction.ok_or_else(|| CliError::Internal("candidate without prediction".into()))?,
            simulation: simulate_plan(cost, &plan, samples, &options)?,
            plan,
        })
    };
    let optimized = side(&orch.best, mode)?;
    let baseline = side(&base, ReorderMode::None)?;
    Ok(CompareReport {
        command: "compare",
        inputs,
        speedup: ratio(baseline.simulation.identity.t_iter, optimized.simulation.reordered.t_iter),
        speedup_without_reorder: ratio(baseline.simulation.identity.t_iter, optimized.simulation.identity.t_iter),
        predicted_speedup: ratio(baseline.predicted.t_iter, optimized.predicted.t_iter),
        optimized,
        baseline,
        baseline_settings: *rigid,
    })
}

fn compare(a: &CompareArgs) -> Result<Output, CliError> {
    let started = Instant::now();
    let setup = Setup::load(&a.common.model, &a.common.cluster)?;
    let w = Workload::load(&a.workload, a.bs as usize, a.common.seed, setup.seq_len())?;
    let request = PlanRequest::new(a.bs, mean_load(&w.samples)).with_vpp(a.vpp).with_execution(execution(&a.common));
    let inputs = Inputs {
        model_sha256: setup.model_sha256.clone(),
        cluster_sha256: setup.cluster_sha256.clone(),
        workload_sha256: Some(w.sha256.clone()),
        plan_sha256: None,
        seed: w.seed,
        global_batch: a.bs,
        vpp: a.vpp,
    };
    let solve = Instant::now();
    let report = compare_on(&setup.cost, &request, &a.baseline.settings(), &w.samples, a.reorder, inputs)?;
    let solve_seconds = solve.elapsed().as_secs_f64();
    let summary = table(
        &["plan", "t_iter_identity_s", "t_iter_reordered_s"],
        &[
            vec![
                "optimized".into(),
                format!("{:.6}", report.optimized.simulation.identity.t_iter),
                format!("{:.6}", report.optimized.simulation.reordered.t_iter),
            ],
            vec!["rigid".into(), format!("{:.6}", report.baseline.simulation.identity.t_iter), "-".into()],
        ],
    );
    let run = RunInfo::new(started.elapsed().as_secs_f64(), Some(solve_seconds));
    Ok(Output { report: finalize(report, run)?, table: a.common.table.then_some(summary) })
}

#[derive(Serialize)]
struct GenerateReport {
    command: &'static str,
    workload_sha256: String,
    seed: u64,
    samples: usize,
    token_totals: TokenTotals,
    trace_sha256: String,
}

fn generate(a: &GenerateArgs) -> Result<Output, CliError> {
    let started = Instant::now();
    let (mut spec, workload_sha256) = Workload::spec(&a.workload)?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let samples = synth_batch(&spec, a.bs).map_err(|e| CliError::Config(e.to_string()))?;
    let mut buf = Vec::new();
    write_samples(&mut buf, &samples).map_err(|e| CliError::Internal(e.to_string()))?;
    std::fs::write(&a.out, &buf).map_err(|e| CliError::Config(format!("{}: {e}", a.out.display())))?;
    let report = GenerateReport {
        command: "generate",
        workload_sha256,
        seed: spec.seed,
        samples: samples.len(),
        token_totals: token_totals(&samples, spec.seq_len),
        trace_sha256: sha256_hex(&buf),
    };
    let run = RunInfo::new(started.elapsed().as_secs_f64(), None);
    Ok(Output { report: finalize(report, run)?, table: None })
}
