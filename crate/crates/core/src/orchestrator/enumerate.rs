use serde::Serialize;

use crate::model::{ModuleKind, Plan};

use super::Predictor;

/// TP and DP sizes of the three units, ordered
/// `(tp_me, dp_me, tp_lm, dp_lm, tp_mg, dp_mg)` for lexicographic comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct ParallelTuple {
    pub tp_encoder: u32,
    pub dp_encoder: u32,
    pub tp_backbone: u32,
    pub dp_backbone: u32,
    pub tp_generator: u32,
    pub dp_generator: u32,
}

impl ParallelTuple {
    pub fn of(plan: &Plan) -> Self {
        ParallelTuple {
            tp_encoder: plan.encoder.tp,
            dp_encoder: plan.encoder.dp,
            tp_backbone: plan.backbone.tp,
            dp_backbone: plan.backbone.dp,
            tp_generator: plan.generator.tp,
            dp_generator: plan.generator.dp,
        }
    }

    pub fn tp(&self, kind: ModuleKind) -> u32 {
        match kind {
            ModuleKind::Encoder => self.tp_encoder,
            ModuleKind::Backbone => self.tp_backbone,
            ModuleKind::Generator => self.tp_generator,
        }
    }

    pub fn dp(&self, kind: ModuleKind) -> u32 {
        match kind {
            ModuleKind::Encoder => self.dp_encoder,
            ModuleKind::Backbone => self.dp_backbone,
            ModuleKind::Generator => self.dp_generator,
        }
    }

    /// GPUs in one pipeline stage of `kind`.
    pub fn width(&self, kind: ModuleKind) -> u32 {
        self.tp(kind) * self.dp(kind)
    }
}

/// Divisors of `n` in ascending order.
pub fn divisors(n: u32) -> Vec<u32> {
    let mut small = Vec::new();
    let mut large = Vec::new();
    let mut d = 1u32;
    while u64::from(d) * u64::from(d) <= u64::from(n) {
        if n.is_multiple_of(d) {
            small.push(d);
            if d != n / d {
                large.push(n / d);
            }
        }
        d += 1;
    }
    small.extend(large.into_iter().rev());
    small
}

/// All TP/DP assignments with TP within one node, `DP_lm | BS`,
/// `DP_me | DP_lm`, `DP_mg | DP_lm`, and at least one pipeline stage per unit
/// fitting the cluster. Output is sorted lexicographically and duplicate-free.
pub fn enumerate_parallelism(predictor: &Predictor<'_>, global_batch: u32) -> Vec<ParallelTuple> {
    let cluster = &predictor.cost.cluster;
    let n = cluster.total_gpus;
    let tps = |kind| -> Vec<u32> { cluster.tp_choices().filter(|tp| predictor.supports(kind, *tp)).collect() };
    let (tp_me, tp_lm, tp_mg) = (tps(ModuleKind::Encoder), tps(ModuleKind::Backbone), tps(ModuleKind::Generator));
    let dp_lm_choices = divisors(global_batch);
    let mut out = Vec::new();
    for &te in &tp_me {
        for &dp_lm in &dp_lm_choices {
            let sub = divisors(dp_lm);
            for &de in &sub {
                for &tl in &tp_lm {
                    if te * de + tl * dp_lm > n {
                        continue;
                    }
                    for &tg in &tp_mg {
                        for &dg in &sub {
                            if te * de + tl * dp_lm + tg * dg > n {
                                continue;
                            }
                            out.push(ParallelTuple {
                                tp_encoder: te,
                                dp_encoder: de,
                                tp_backbone: tl,
                                dp_backbone: dp_lm,
                                tp_generator: tg,
                                dp_generator: dg,
                            });
                        }
                    }
                }
            }
        }
    }
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::super::testutil::cost;
    use super::super::{PlanRequest, PlanningLoad};
    use super::*;

    #[test]
    fn divisor_lists() {
        assert_eq!(divisors(1), vec![1]);
        assert_eq!(divisors(12), vec![1, 2, 3, 4, 6, 12]);
        assert_eq!(divisors(13), vec![1, 13]);
        assert_eq!(divisors(1920).len(), 32);
    }

    fn tuples(n: u32, bs: u32) -> Vec<ParallelTuple> {
        let c = cost([1.0, 1.0, 1.0], n);
        let req = PlanRequest::new(bs, PlanningLoad { encoder_tokens: 1.0, generator_tokens: 1.0 });
        let p = Predictor::new(&c, &req).unwrap();
        enumerate_parallelism(&p, bs)
    }

    #[test]
    fn backbone_dp_divides_batch() {
        let dps: std::collections::BTreeSet<u32> = tuples(64, 4).iter().map(|t| t.dp_backbone).collect();
        assert_eq!(dps.into_iter().collect::<Vec<_>>(), vec![1, 2, 4]);
        let dps: std::collections::BTreeSet<u32> = tuples(64, 7).iter().map(|t| t.dp_backbone).collect();
        assert_eq!(dps.into_iter().collect::<Vec<_>>(), vec![1, 7]);
    }

    #[test]
    fn count_matches_independent_enumeration() {
        let (n, bs) = (16u32, 8u32);
        let got = tuples(n, bs);
        let mut count = 0;
        for te in [1, 2, 4, 8] {
            for tl in [1, 2, 4, 8] {
                for tg in [1, 2, 4, 8] {
                    for dl in 1..=bs {
                        for de in 1..=dl {
                            for dg in 1..=dl {
                                let ok = bs % dl == 0 && dl % de == 0 && dl % dg == 0;
                                if ok && te * de + tl * dl + tg * dg <= n {
                                    count += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
        assert_eq!(got.len(), count);
        let mut dedup = got.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), got.len());
        assert!(got.windows(2).all(|w| w[0] < w[1]));
    }
}
