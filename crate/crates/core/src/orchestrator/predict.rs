use serde::{Deserialize, Serialize};

use crate::cost::{CostError, CostModel, Phase};
use crate::model::{ModuleKind, Plan, ALLOWED_TP};

use super::{OrchestratorError, PlanRequest};

/// Expected modality token load of one microbatch slot, used for planning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanningLoad {
    pub encoder_tokens: f64,
    pub generator_tokens: f64,
}

impl PlanningLoad {
    pub fn tokens(&self, kind: ModuleKind, seq_len: u32) -> f64 {
        match kind {
            ModuleKind::Encoder => self.encoder_tokens,
            ModuleKind::Backbone => f64::from(seq_len),
            ModuleKind::Generator => self.generator_tokens,
        }
    }
}

/// Predicted iteration time split into the pipeline warm-up (first
/// microbatch end to end) and the steady phase limited by the slowest stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prediction {
    pub t_warm: f64,
    pub t_steady: f64,
    /// `t_warm + t_steady`.
    pub t_iter: f64,
    /// Forward plus backward seconds of one stage of each unit, for one microbatch.
    pub stage_times: [f64; 3],
    /// Gradient synchronisation, reported alongside but not part of `t_iter`.
    pub dp_sync: f64,
}

impl Prediction {
    fn from_stages(plan: &Plan, stage_times: [f64; 3], dp_sync: f64) -> Self {
        let depth: f64 = ModuleKind::ALL
            .into_iter()
            .map(|k| f64::from(plan.choice(k).pp) * stage_times[k.index()])
            .sum();
        let t_warm = depth / f64::from(plan.vpp);
        let slowest = stage_times.into_iter().fold(0.0, f64::max);
        let t_steady = slowest * (f64::from(plan.microbatches()) - 1.0);
        Prediction { t_warm, t_steady, t_iter: t_warm + t_steady, stage_times, dp_sync }
    }
}

/// Predicts the iteration time of `plan` directly from the cost model.
pub fn predict_times(plan: &Plan, cost: &CostModel, load: &PlanningLoad) -> Result<Prediction, CostError> {
    let mut stage_times = [0.0; 3];
    for kind in ModuleKind::ALL {
        let tokens = load.tokens(kind, cost.model.seq_len);
        let f = cost.stage_time_at_load(kind, plan, tokens, Phase::Forward)?.seconds;
        let b = cost.stage_time_at_load(kind, plan, tokens, Phase::Backward)?.seconds;
        stage_times[kind.index()] = f + b;
    }
    Ok(Prediction::from_stages(plan, stage_times, cost.dp_sync_time(plan)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct UnitCost {
    pub fwd: f64,
    pub bwd: f64,
    /// Boundary bytes per microbatch slot before DP coupling.
    pub bytes: f64,
}

/// Cost lookups precomputed at the planning load, shared by all candidates.
#[derive(Debug, Clone)]
pub struct Predictor<'a> {
    pub(crate) cost: &'a CostModel,
    pub(crate) global_batch: u32,
    pub(crate) vpp: u32,
    pub(crate) load: PlanningLoad,
    table: [[Option<UnitCost>; 4]; 3],
}

fn tp_slot(tp: u32) -> Option<usize> {
    ALLOWED_TP.iter().position(|t| *t == tp)
}

impl<'a> Predictor<'a> {
    pub fn new(cost: &'a CostModel, request: &PlanRequest) -> Result<Self, OrchestratorError> {
        if request.global_batch == 0 || request.vpp == 0 {
            return Err(OrchestratorError::Infeasible("batch size and vpp must be positive".into()));
        }
        let mut table = [[None; 4]; 3];
        for kind in ModuleKind::ALL {
            let tokens = request.load.tokens(kind, cost.model.seq_len);
            let hidden = f64::from(cost.model.module(kind).arch.hidden);
            for (slot, tp) in ALLOWED_TP.into_iter().enumerate() {
                let lookup = cost
                    .unit_forward_time(kind, tp, tokens)
                    .and_then(|f| cost.unit_backward_time(kind, tp, tokens).map(|b| (f, b)));
                match lookup {
                    Ok((f, b)) => {
                        for w in f.warning.iter().chain(b.warning.iter()) {
                            log::warn!("{w}");
                        }
                        table[kind.index()][slot] = Some(UnitCost {
                            fwd: f.seconds,
                            bwd: b.seconds,
                            bytes: tokens * hidden * cost.model.activation_element_bytes,
                        });
                    }
                    Err(CostError::EmptyProfile { .. }) => {}
                    Err(e) => return Err(e.into()),
                }
            }
            if table[kind.index()].iter().all(Option::is_none) {
                return Err(CostError::EmptyProfile { kind, tp: 1 }.into());
            }
        }
        Ok(Predictor { cost, global_batch: request.global_batch, vpp: request.vpp, load: request.load, table })
    }

    pub fn cost_model(&self) -> &CostModel {
        self.cost
    }

    pub fn global_batch(&self) -> u32 {
        self.global_batch
    }

    pub fn vpp(&self) -> u32 {
        self.vpp
    }

    pub fn load(&self) -> PlanningLoad {
        self.load
    }

    /// Whether module times exist for `kind` at TP size `tp`.
    pub fn supports(&self, kind: ModuleKind, tp: u32) -> bool {
        self.unit(kind, tp).is_some()
    }

    pub(crate) fn unit(&self, kind: ModuleKind, tp: u32) -> Option<UnitCost> {
        tp_slot(tp).and_then(|s| self.table[kind.index()][s])
    }

    pub(crate) fn bandwidth(&self, total_gpus: u32) -> f64 {
        let c = &self.cost.cluster;
        if total_gpus <= c.gpus_per_node {
            c.intra_node_bw
        } else {
            c.inter_node_bw
        }
    }

    /// Same arithmetic as [`predict_times`], from the precomputed table.
    pub fn predict(&self, plan: &Plan) -> Option<Prediction> {
        let bw = self.bandwidth(plan.total_gpus());
        let mut stage_times = [0.0; 3];
        for kind in ModuleKind::ALL {
            let c = plan.choice(kind);
            let u = self.unit(kind, c.tp)?;
            let coupling = plan.coupling(kind);
            let comm = if u.bytes * coupling <= 0.0 { 0.0 } else { u.bytes * coupling / bw };
            let pp = f64::from(c.pp);
            stage_times[kind.index()] = (coupling * u.fwd / pp + comm) + (coupling * u.bwd / pp + comm);
        }
        Some(Prediction::from_stages(plan, stage_times, self.cost.dp_sync_time(plan)))
    }
}
