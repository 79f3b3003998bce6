use serde::{Deserialize, Serialize};

use crate::cost::{memory_check, CostModel};
use crate::model::{ModuleKind, ParallelismChoice, Plan};

use super::{compare_plans, divisors, CandidateResult, CandidateStatus, OrchestratorError, ParallelTuple, PlanRequest, Predictor};

/// Largest cluster the exhaustive search accepts by default.
pub const DEFAULT_ORACLE_CAP: u32 = 32;

fn keep_best(best: &mut Option<(Plan, super::Prediction)>, plan: Plan, pred: super::Prediction) {
    let better = match best {
        None => true,
        Some((bp, bt)) => compare_plans((&plan, pred.t_iter), (bp, bt.t_iter)).is_lt(),
    };
    if better {
        *best = Some((plan, pred));
    }
}

fn into_result(best: Option<(Plan, super::Prediction)>) -> Option<CandidateResult> {
    best.map(|(plan, prediction)| CandidateResult {
        tuple: ParallelTuple::of(&plan),
        status: CandidateStatus::Feasible,
        continuous: None,
        plan: Some(plan),
        prediction: Some(prediction),
    })
}

/// Optional pins for the rigid baseline. Unset fields are tuned for the best
/// predicted time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RigidSettings {
    /// Shared TP size.
    pub tp: Option<u32>,
    /// Backbone pipeline depth.
    pub backbone_pp: Option<u32>,
}

/// Megatron-style rigid plan: encoder and generator reuse the backbone's TP
/// and DP sizes and each occupy a single extra pipeline stage. The shared
/// TP, DP and backbone pipeline depth are tuned for the best predicted time.
pub fn rigid_baseline(cost: &CostModel, request: &PlanRequest) -> Result<CandidateResult, OrchestratorError> {
    rigid_baseline_with(cost, request, &RigidSettings::default())
}

/// Rigid plan with the TP size and backbone depth optionally fixed, as in a
/// hand-configured Megatron-LM run.
pub fn rigid_baseline_with(cost: &CostModel, request: &PlanRequest, settings: &RigidSettings) -> Result<CandidateResult, OrchestratorError> {
    let predictor = Predictor::new(cost, request)?;
    let n = cost.cluster.total_gpus;
    let mut best = None;
    for tp in cost.cluster.tp_choices() {
        if settings.tp.is_some_and(|t| t != tp) || !ModuleKind::ALL.iter().all(|k| predictor.supports(*k, tp)) {
            continue;
        }
        for dp in divisors(request.global_batch) {
            let width = tp * dp;
            if 3 * width > n {
                continue;
            }
            for pp in 1..=(n / width - 2) {
                if settings.backbone_pp.is_some_and(|b| b != pp) {
                    continue;
                }
                let plan = Plan::from_choices(
                    ParallelismChoice::new(tp, dp, 1),
                    ParallelismChoice::new(tp, dp, pp),
                    ParallelismChoice::new(tp, dp, 1),
                    request.global_batch,
                    request.vpp,
                );
                if !memory_check(&plan, &cost.model, &cost.cluster).fits {
                    continue;
                }
                if let Some(pred) = predictor.predict(&plan) {
                    keep_best(&mut best, plan, pred);
                }
            }
        }
    }
    into_result(best).ok_or_else(|| OrchestratorError::Infeasible("no rigid plan fits the cluster".into()))
}

/// Exhaustive search over every integer plan: all TP sizes, all DP sizes
/// meeting the divisibility couplings, and all pipeline depths that fit.
pub fn brute_force_oracle(cost: &CostModel, request: &PlanRequest, cap: u32) -> Result<CandidateResult, OrchestratorError> {
    let n = cost.cluster.total_gpus;
    if n > cap {
        return Err(OrchestratorError::CapExceeded { gpus: n, cap });
    }
    let predictor = Predictor::new(cost, request)?;
    let bs = request.global_batch;
    let tps: Vec<u32> = cost.cluster.tp_choices().collect();
    let mut best = None;
    for &tl in &tps {
        for dl in (1..=bs).filter(|d| bs.is_multiple_of(*d)) {
            for yl in (1..=n).filter(|y| y % (tl * dl) == 0) {
                for &te in &tps {
                    for de in (1..=dl).filter(|d| dl % d == 0) {
                        for x in (1..=n - yl).filter(|x| x % (te * de) == 0) {
                            for &tg in &tps {
                                for dg in (1..=dl).filter(|d| dl % d == 0) {
                                    for z in (1..=n - yl - x).filter(|z| z % (tg * dg) == 0) {
                                        let plan = Plan::from_choices(
                                            ParallelismChoice::new(te, de, x / (te * de)),
                                            ParallelismChoice::new(tl, dl, yl / (tl * dl)),
                                            ParallelismChoice::new(tg, dg, z / (tg * dg)),
                                            bs,
                                            request.vpp,
                                        );
                                        if !memory_check(&plan, &cost.model, &cost.cluster).fits {
                                            continue;
                                        }
                                        if let Some(pred) = predictor.predict(&plan) {
                                            keep_best(&mut best, plan, pred);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    into_result(best).ok_or(OrchestratorError::NoFeasiblePlan)
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::super::{model_orchestration, PlanningLoad};
    use super::*;

    const LOAD: PlanningLoad = PlanningLoad { encoder_tokens: 1.0, generator_tokens: 1.0 };

    #[test]
    fn rigid_shares_tp_and_single_stages() {
        let c = cost([0.5, 8.0, 0.5], 32);
        let r = rigid_baseline(&c, &PlanRequest::new(4, LOAD)).unwrap().plan.unwrap();
        assert_eq!(r.encoder.tp, r.backbone.tp);
        assert_eq!(r.generator.tp, r.backbone.tp);
        assert_eq!(r.encoder.dp, r.backbone.dp);
        assert_eq!((r.encoder.pp, r.generator.pp), (1, 1));
    }

    #[test]
    fn oracle_on_three_gpus() {
        let c = cost([1.0, 1.0, 1.0], 3);
        let r = brute_force_oracle(&c, &PlanRequest::new(2, LOAD), DEFAULT_ORACLE_CAP).unwrap().plan.unwrap();
        assert_eq!((r.alloc.encoder, r.alloc.backbone, r.alloc.generator), (1, 1, 1));
    }

    #[test]
    fn oracle_respects_cap() {
        let c = cost([1.0, 1.0, 1.0], 64);
        assert_eq!(
            brute_force_oracle(&c, &PlanRequest::new(2, LOAD), 32).unwrap_err(),
            OrchestratorError::CapExceeded { gpus: 64, cap: 32 }
        );
    }

    #[test]
    fn optimizer_matches_oracle_and_beats_rigid() {
        for (base, n, bs) in [([1.0, 4.0, 2.0], 8, 4), ([0.2, 3.0, 1.5], 12, 8), ([2.0, 2.0, 0.1], 16, 6)] {
            let c = cost(base, n);
            let req = PlanRequest::new(bs, LOAD);
            let opt = model_orchestration(&c, &req).unwrap().best.t_iter().unwrap();
            let oracle = brute_force_oracle(&c, &req, DEFAULT_ORACLE_CAP).unwrap().t_iter().unwrap();
            let rigid = rigid_baseline(&c, &req).unwrap().t_iter().unwrap();
            assert!(opt <= oracle * 1.01, "{opt} vs {oracle}");
            assert!(oracle <= opt * (1.0 + 1e-9));
            assert!(opt <= rigid * (1.0 + 1e-9));
        }
    }
}
