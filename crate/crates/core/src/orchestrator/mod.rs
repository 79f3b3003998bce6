//! Resource allocation and parallelism planning.
//!
//! For every feasible assignment of TP and DP sizes to the three units the
//! planner solves a continuous allocation problem (GPUs per unit), rounds it
//! to integer pipeline depths, and keeps the plan with the smallest predicted
//! iteration time. A Megatron-style rigid plan and an exhaustive search are
//! provided for comparison and testing.

mod baseline;
mod enumerate;
mod predict;
mod solver;

pub use baseline::{brute_force_oracle, rigid_baseline, rigid_baseline_with, RigidSettings, DEFAULT_ORACLE_CAP};
pub use enumerate::{divisors, enumerate_parallelism, ParallelTuple};
pub use predict::{predict_times, PlanningLoad, Prediction, Predictor};
pub use solver::{solve_subproblem, ContinuousOptimum};

use std::cmp::Ordering;

use serde::Serialize;
use thiserror::Error;

use crate::cost::{CostError, CostModel};
use crate::model::Plan;
use crate::par::Execution;

#[derive(Debug, Error, PartialEq)]
pub enum OrchestratorError {
    #[error("no feasible plan for this model, cluster and batch size")]
    NoFeasiblePlan,
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("no integer plan is feasible near the continuous optimum")]
    NoIntegerFeasible,
    #[error("exhaustive search capped at {cap} GPUs, cluster has {gpus}")]
    CapExceeded { gpus: u32, cap: u32 },
    #[error(transparent)]
    Cost(#[from] CostError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateStatus {
    Feasible,
    /// Memory floors alone exceed the cluster.
    Infeasible,
    NoIntegerFeasible,
}

/// Outcome of one parallelism tuple.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateResult {
    pub tuple: ParallelTuple,
    pub status: CandidateStatus,
    pub continuous: Option<ContinuousOptimum>,
    pub plan: Option<Plan>,
    pub prediction: Option<Prediction>,
}

impl CandidateResult {
    pub fn t_iter(&self) -> Option<f64> {
        self.prediction.as_ref().map(|p| p.t_iter)
    }
}

/// Planner inputs beyond the cost model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanRequest {
    pub global_batch: u32,
    pub vpp: u32,
    pub load: PlanningLoad,
    #[serde(skip)]
    pub execution: Execution,
}

impl PlanRequest {
    pub fn new(global_batch: u32, load: PlanningLoad) -> Self {
        PlanRequest { global_batch, vpp: 1, load, execution: Execution::default() }
    }

    pub fn with_vpp(mut self, vpp: u32) -> Self {
        self.vpp = vpp;
        self
    }

    pub fn with_execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self
    }
}

/// Relative tolerance under which two predicted iteration times tie.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// Total order used to pick the best plan: iteration time (ties within
/// [`TIE_TOLERANCE`]), then fewer GPUs, then the lexicographic parallelism
/// tuple, then pipeline depths.
pub fn compare_plans(a: (&Plan, f64), b: (&Plan, f64)) -> Ordering {
    let (pa, ta) = a;
    let (pb, tb) = b;
    if (ta - tb).abs() > TIE_TOLERANCE * ta.abs().max(tb.abs()) {
        return ta.total_cmp(&tb);
    }
    pa.total_gpus()
        .cmp(&pb.total_gpus())
        .then_with(|| ParallelTuple::of(pa).cmp(&ParallelTuple::of(pb)))
        .then_with(|| {
            let depth = |p: &Plan| (p.encoder.pp, p.backbone.pp, p.generator.pp);
            depth(pa).cmp(&depth(pb))
        })
}

/// Full planner report: every candidate plus the winner.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Orchestration {
    pub best: CandidateResult,
    pub candidates: Vec<CandidateResult>,
}

/// Enumerates parallelism tuples, solves each subproblem, and returns the
/// plan with the smallest predicted iteration time.
pub fn model_orchestration(cost: &CostModel, request: &PlanRequest) -> Result<Orchestration, OrchestratorError> {
    let predictor = Predictor::new(cost, request)?;
    let tuples = enumerate_parallelism(&predictor, request.global_batch);
    let candidates = request.execution.map(&tuples, |t| solve_subproblem(&predictor, *t));
    let mut best: Option<&CandidateResult> = None;
    for c in &candidates {
        let (Some(plan), Some(t)) = (&c.plan, c.t_iter()) else { continue };
        let better = match best {
            None => true,
            Some(b) => compare_plans((plan, t), (b.plan.as_ref().unwrap(), b.t_iter().unwrap())) == Ordering::Less,
        };
        if better {
            best = Some(c);
        }
    }
    let best = best.cloned().ok_or(OrchestratorError::NoFeasiblePlan)?;
    log::debug!("orchestration evaluated {} candidates", candidates.len());
    Ok(Orchestration { best, candidates })
}
