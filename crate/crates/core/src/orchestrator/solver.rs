//! Continuous allocation for a fixed TP/DP assignment, then integer rounding.
//!
//! With unit `u` holding `g_u` GPUs (pipeline depth `g_u / (tp_u dp_u)`), one
//! stage of `u` takes `A_u / g_u + c_u`: the coupled module time spread over
//! the pipeline plus the boundary transfers. The predicted iteration time is
//!
//! `K + sum_u w_u g_u + (l - 1) max_u (A_u / g_u + c_u)`
//!
//! which is convex in `g`. For a target stage time `tau` the cheapest
//! allocation is `g_u(tau) = max(floor_u, A_u / (tau - c_u))`, so the problem
//! reduces to a convex scalar search over `tau`, restricted to levels whose
//! allocation fits in the cluster.

use serde::Serialize;

use crate::cost::{memory_floor_gpus, unit_bytes_per_gpu};
use crate::model::{ModuleKind, ParallelismChoice, Plan};

use super::{compare_plans, CandidateResult, CandidateStatus, ParallelTuple, Predictor};

/// Relative tolerance of the continuous search.
pub const CONTINUOUS_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContinuousOptimum {
    /// Real-valued GPU counts `(x, y, z)`.
    pub gpus: [f64; 3],
    /// Predicted iteration time at the continuous point.
    pub objective: f64,
}

#[derive(Debug, Clone, Copy)]
struct UnitTerms {
    width: u32,
    /// Smallest real GPU count meeting memory and one-stage constraints.
    floor: f64,
    /// Smallest integer pipeline depth meeting the memory constraint.
    pp_min: u32,
    a: f64,
    c: f64,
    warm_weight: f64,
}

fn min_depth(p: &Predictor<'_>, kind: ModuleKind, tp: u32, dp: u32, floor: f64, max_pp: u32) -> Option<u32> {
    let model = &p.cost.model;
    let cap = p.cost.cluster.gpu_mem_bytes;
    let fits = |pp: u32| unit_bytes_per_gpu(model, kind, tp, dp, pp) <= cap;
    let width = f64::from(tp * dp);
    let mut pp = ((floor / width).ceil() as u32).clamp(1, max_pp.max(1));
    while pp > 1 && fits(pp - 1) {
        pp -= 1;
    }
    while !fits(pp) {
        if pp >= max_pp {
            return None;
        }
        pp += 1;
    }
    Some(pp)
}

struct Objective {
    units: [UnitTerms; 3],
    base: f64,
    steady_count: f64,
}

impl Objective {
    fn gpus_at(&self, tau: f64) -> [f64; 3] {
        self.units.map(|u| {
            if tau <= u.c {
                f64::INFINITY
            } else {
                u.floor.max(u.a / (tau - u.c))
            }
        })
    }

    fn total_at(&self, tau: f64) -> f64 {
        self.gpus_at(tau).iter().sum()
    }

    fn value_at(&self, tau: f64) -> f64 {
        let g = self.gpus_at(tau);
        let warm: f64 = self.units.iter().zip(g).map(|(u, g)| u.warm_weight * g).sum();
        self.base + warm + self.steady_count * tau
    }

    /// Value at an explicit allocation (the max term taken over units).
    fn value(&self, g: [f64; 3]) -> f64 {
        let tau = self.units.iter().zip(g).map(|(u, g)| u.a / g + u.c).fold(0.0, f64::max);
        let warm: f64 = self.units.iter().zip(g).map(|(u, g)| u.warm_weight * g).sum();
        self.base + warm + self.steady_count * tau
    }
}

fn minimize(obj: &Objective, n: f64) -> ContinuousOptimum {
    let hi = obj.units.iter().map(|u| u.a / u.floor + u.c).fold(0.0, f64::max);
    // Smallest level whose allocation fits: the GPU total decreases in tau.
    let mut lo = obj.units.iter().map(|u| u.c).fold(0.0, f64::max);
    let mut top = hi;
    if obj.total_at(lo) > n {
        for _ in 0..200 {
            let mid = 0.5 * (lo + top);
            if obj.total_at(mid) > n {
                lo = mid;
            } else {
                top = mid;
            }
            if top - lo <= 1e-15 * top {
                break;
            }
        }
        lo = top;
    }
    // Golden-section search for the convex objective on [lo, hi].
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi.max(lo));
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let (mut f1, mut f2) = (obj.value_at(x1), obj.value_at(x2));
    for _ in 0..300 {
        if b - a <= CONTINUOUS_TOLERANCE * 1e-3 * b.abs().max(f64::MIN_POSITIVE) {
            break;
        }
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = obj.value_at(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = obj.value_at(x2);
        }
    }
    let mut best_tau = 0.5 * (a + b);
    for t in [lo, hi] {
        if obj.value_at(t) < obj.value_at(best_tau) {
            best_tau = t;
        }
    }
    let gpus = obj.gpus_at(best_tau);
    ContinuousOptimum { gpus, objective: obj.value(gpus) }
}

/// Solves the allocation for one TP/DP assignment and returns the best
/// integer plan found in the rounding neighbourhood of the continuous optimum.
pub fn solve_subproblem(predictor: &Predictor<'_>, tuple: ParallelTuple) -> CandidateResult {
    let cost = predictor.cost;
    let n = cost.cluster.total_gpus;
    let infeasible = |status| CandidateResult { tuple, status, continuous: None, plan: None, prediction: None };
    let dp_lm = tuple.dp_backbone;
    let bw = predictor.bandwidth(n);
    let vpp = f64::from(predictor.vpp);

    let mut units = [UnitTerms { width: 0, floor: 0.0, pp_min: 0, a: 0.0, c: 0.0, warm_weight: 0.0 }; 3];
    let mut base = 0.0;
    for kind in ModuleKind::ALL {
        let (tp, dp) = (tuple.tp(kind), tuple.dp(kind));
        let Some(u) = predictor.unit(kind, tp) else { return infeasible(CandidateStatus::Infeasible) };
        let coupling = f64::from(dp_lm) / f64::from(dp);
        let width = tp * dp;
        let Some(mem_floor) = memory_floor_gpus(&cost.model, &cost.cluster, kind, tp, dp) else {
            return infeasible(CandidateStatus::Infeasible);
        };
        let floor = mem_floor.max(f64::from(width));
        let Some(pp_min) = min_depth(predictor, kind, tp, dp, floor, n / width) else {
            return infeasible(CandidateStatus::Infeasible);
        };
        let c = if u.bytes * coupling <= 0.0 { 0.0 } else { 2.0 * u.bytes * coupling / bw };
        units[kind.index()] = UnitTerms {
            width,
            floor,
            pp_min,
            a: coupling * (u.fwd + u.bwd) * f64::from(width),
            c,
            warm_weight: c / (f64::from(width) * vpp),
        };
        base += coupling * (u.fwd + u.bwd) / vpp;
    }
    let min_total: u32 = units.iter().map(|u| u.width * u.pp_min).sum();
    let floor_total: f64 = units.iter().map(|u| u.floor).sum();
    if min_total > n || floor_total > f64::from(n) {
        return infeasible(CandidateStatus::Infeasible);
    }

    let microbatches = f64::from(predictor.global_batch / dp_lm);
    let obj = Objective { units, base, steady_count: microbatches - 1.0 };
    let continuous = minimize(&obj, f64::from(n));

    // Pipeline depths to try per unit: the minimum plus the floor/ceil
    // neighbourhood of the continuous depth.
    let depth_choices: Vec<Vec<u32>> = units
        .iter()
        .zip(continuous.gpus)
        .map(|(u, g)| {
            let others: u32 = units.iter().map(|o| o.width * o.pp_min).sum::<u32>() - u.width * u.pp_min;
            let max_pp = (n - others) / u.width;
            let real = g / f64::from(u.width);
            let fl = real.floor().max(0.0) as u32;
            let mut v = vec![u.pp_min, fl.saturating_sub(1), fl, fl + 1, fl + 2];
            v.retain(|pp| *pp >= u.pp_min && *pp <= max_pp);
            v.sort_unstable();
            v.dedup();
            v
        })
        .collect();

    let mut best: Option<(Plan, super::Prediction)> = None;
    for &pe in &depth_choices[0] {
        for &pl in &depth_choices[1] {
            for &pg in &depth_choices[2] {
                let total = units[0].width * pe + units[1].width * pl + units[2].width * pg;
                if total > n {
                    continue;
                }
                let plan = Plan::from_choices(
                    ParallelismChoice::new(tuple.tp_encoder, tuple.dp_encoder, pe),
                    ParallelismChoice::new(tuple.tp_backbone, dp_lm, pl),
                    ParallelismChoice::new(tuple.tp_generator, tuple.dp_generator, pg),
                    predictor.global_batch,
                    predictor.vpp,
                );
                let Some(pred) = predictor.predict(&plan) else { continue };
                let better = match &best {
                    None => true,
                    Some((bp, bt)) => compare_plans((&plan, pred.t_iter), (bp, bt.t_iter)).is_lt(),
                };
                if better {
                    best = Some((plan, pred));
                }
            }
        }
    }
    match best {
        Some((plan, prediction)) => CandidateResult {
            tuple,
            status: CandidateStatus::Feasible,
            continuous: Some(continuous),
            plan: Some(plan),
            prediction: Some(prediction),
        },
        None => CandidateResult {
            tuple,
            status: CandidateStatus::NoIntegerFeasible,
            continuous: Some(continuous),
            plan: None,
            prediction: None,
        },
    }
}
