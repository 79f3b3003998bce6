use mmplan_core::cost::{CostModel, CostProfile};
use mmplan_core::model::{ArchDesc, ClusterSpec, ModelSpec, ModuleKind, ModuleMemory, ModuleSpec, ParallelismChoice, Plan, Sample};
use mmplan_core::reorder::{
    disaggregated_reorder, inter_reorder, inter_reorder_vpp, intra_reorder, intra_reorder_by, round_robin_loads, select_closest, select_min,
    InterOptions, IntervalEval, ReorderMode, ReorderOptions, SortOrder,
};
use mmplan_core::sim::{schedule_1f1b, schedule_interleaved, StageTimes};
use proptest::prelude::*;

fn model() -> ModelSpec {
    let m = |p: f64| ModuleSpec {
        arch: ArchDesc { layers: 4, hidden: 512, ffn_hidden: 2048, heads: 8, groups: 8 },
        memory: ModuleMemory { param_grad_bytes: p, optimizer_bytes: 2.0 * p, activation_bytes: p / 10.0 },
        frozen: false,
    };
    ModelSpec {
        encoder: m(1e9),
        backbone: m(8e9),
        generator: m(1e9),
        seq_len: 65536,
        activation_element_bytes: 0.0,
        frozen_backward_factor: 1.0 / 3.0,
    }
}

/// Encoder and generator time linear in tokens, constant backbone.
fn cost() -> CostModel {
    let mut rows = Vec::new();
    for kind in ModuleKind::ALL {
        for tp in [1u32, 2, 4, 8] {
            match kind {
                ModuleKind::Backbone => rows.push((kind, tp, 0.0, 2.0, Some(4.0))),
                _ => {
                    let s = if kind == ModuleKind::Encoder { 1e-3 } else { 5e-4 };
                    rows.push((kind, tp, 1.0, s, Some(2.0 * s)));
                    rows.push((kind, tp, 1e6, s * 1e6, Some(2.0 * s * 1e6)));
                }
            }
        }
    }
    let cluster =
        ClusterSpec { total_gpus: 64, gpus_per_node: 8, peak_flops: 1e15, gpu_mem_bytes: 80e9, intra_node_bw: 1e11, inter_node_bw: 2.5e10 };
    CostModel::new(model(), cluster, CostProfile::from_rows(&rows).unwrap())
}

fn plan(dp: u32, bb_pp: u32, bs: u32, vpp: u32) -> Plan {
    Plan::from_choices(ParallelismChoice::new(1, dp, 1), ParallelismChoice::new(1, dp, bb_pp), ParallelismChoice::new(1, dp, 1), bs, vpp)
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

fn batch(tokens: &[u32]) -> Vec<Sample> {
    tokens.iter().map(|&t| Sample::with_images(64, vec![t])).collect()
}

#[test]
fn select_examples() {
    let times = [5.0, 1.0, 3.0];
    assert_eq!(sorted(select_min(&[0, 1, 2], &times, 2).unwrap()), vec![1, 2]);
    assert_eq!(select_closest(&[0, 1, 2], &times, 1, 2.9).unwrap(), vec![2]);
    let times = [5.0, 1.0, 3.0, 2.0];
    assert_eq!(select_closest(&[0, 1, 2, 3], &times, 2, 4.0).unwrap(), vec![2, 1]);
    assert!(select_min(&[0, 1], &times, 3).is_err());
}

#[test]
fn intra_hand_trace() {
    let out = intra_reorder_by(&[2.0, 3.0, 4.0, 5.0], 2, SortOrder::Ascending, None).unwrap();
    assert_eq!(out.order, vec![0, 2, 1, 3]);
    assert_eq!(out.max_load(), 8.0);
}

#[test]
fn ascending_greedy_can_trail_round_robin() {
    // Ascending: {2, 3} then {3, 4}; round robin: {4, 2} and {3, 3}.
    let sizes = [4.0, 3.0, 2.0, 3.0];
    let rr = round_robin_loads(&sizes, 2).into_iter().fold(0.0, f64::max);
    assert_eq!(rr, 6.0);
    assert_eq!(intra_reorder_by(&sizes, 2, SortOrder::Ascending, None).unwrap().max_load(), 7.0);
    assert_eq!(intra_reorder_by(&sizes, 2, SortOrder::Descending, None).unwrap().max_load(), 6.0);
}

#[test]
fn dp_one_only_reorders_within_the_lane() {
    let cost = cost();
    let samples = batch(&[900, 100, 3000, 50, 2000, 700, 400, 1200]);
    let r = disaggregated_reorder(&cost, &plan(1, 2, 8, 1), &samples, &ReorderOptions::default()).unwrap();
    assert_eq!(r.lanes.len(), 1);
    assert_eq!(r.group_loads_before, r.group_loads_after);
    assert_eq!(sorted(r.output_order), (0..8).collect::<Vec<_>>());
}

#[test]
fn skewed_groups_get_balanced() {
    let cost = cost();
    let samples = batch(&[4000, 3500, 3000, 2500, 100, 120, 90, 80]);
    let r = disaggregated_reorder(&cost, &plan(2, 2, 8, 1), &samples, &ReorderOptions::default()).unwrap();
    let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    assert!(max(&r.group_loads_after) < max(&r.group_loads_before));
    assert!(r.t_iter_after <= r.t_iter_before);
}

#[test]
fn fig9_like_skew_is_not_harmed() {
    // l = 6 on 4 stages with one large microbatch up front.
    let mut t = StageTimes::homogeneous(6, 4, 1.0, 2.0);
    for (i, e) in [4.0, 1.0, 0.5, 2.0, 0.7, 1.5].into_iter().enumerate() {
        t.set(i, 0, e, 2.0 * e);
        t.set(i, 3, e / 2.0, e);
    }
    let size: Vec<f64> = (0..6).map(|i| t.fwd(i, 0) + t.fwd(i, 3)).collect();
    let order = inter_reorder(&t, &size, &InterOptions::default()).unwrap();
    let before = schedule_1f1b(&t).unwrap().iteration_time;
    let after = schedule_1f1b(&t.permuted(&order)).unwrap().iteration_time;
    assert!(after <= before, "{after} > {before}");
}

#[test]
fn interleaved_skew_is_not_harmed() {
    // Largest microbatches first.
    let mut t = StageTimes::homogeneous(8, 2, 1.0, 2.0);
    for (i, e) in [3.0, 2.5, 2.2, 1.8, 0.6, 0.5, 0.4, 0.3].into_iter().enumerate() {
        t.set(i, 0, e, 2.0 * e);
    }
    let size: Vec<f64> = (0..8).map(|i| t.fwd(i, 0)).collect();
    let order = inter_reorder_vpp(&t, &size, 2, &InterOptions::default()).unwrap();
    let before = schedule_interleaved(&t, 2).unwrap().iteration_time;
    let after = schedule_interleaved(&t.permuted(&order), 2).unwrap().iteration_time;
    assert!(after <= before, "{after} > {before}");
}

#[test]
fn homogeneous_reorder_keeps_iteration_time() {
    let cost = cost();
    let samples = batch(&[1000; 16]);
    for vpp in [1, 2] {
        let r = disaggregated_reorder(&cost, &plan(2, 2, 16, vpp), &samples, &ReorderOptions::default()).unwrap();
        assert_eq!(r.t_iter_before, r.t_iter_after);
    }
}

#[test]
fn batch_size_is_checked() {
    let err = disaggregated_reorder(&cost(), &plan(2, 2, 8, 1), &batch(&[10; 6]), &ReorderOptions::default());
    assert!(err.is_err());
}

fn lane_times() -> impl Strategy<Value = (StageTimes, Vec<f64>)> {
    (1usize..=12, 1usize..=5).prop_flat_map(|(l, p)| {
        prop::collection::vec(0.05f64..5.0, l).prop_map(move |enc| {
            let mut t = StageTimes::homogeneous(l, p, 1.0, 2.0);
            for (i, e) in enc.iter().enumerate() {
                t.set(i, 0, *e, 2.0 * e);
            }
            (t, enc)
        })
    })
}

proptest! {
    #[test]
    fn intra_is_a_deterministic_permutation(sizes in prop::collection::vec(0.0f64..100.0, 1..40), m in 1usize..6) {
        let out = intra_reorder_by(&sizes, m, SortOrder::Ascending, None).unwrap();
        prop_assert_eq!(sorted(out.order.clone()), (0..sizes.len()).collect::<Vec<_>>());
        let total: f64 = sizes.iter().sum();
        prop_assert!((out.loads.iter().sum::<f64>() - total).abs() < 1e-9);
        let again = intra_reorder_by(&sizes, m, SortOrder::Ascending, None).unwrap();
        prop_assert_eq!(out, again);
    }

    #[test]
    fn intra_on_samples_keeps_the_multiset(tokens in prop::collection::vec(1u32..5000, 1..30), m in 1usize..5) {
        let samples = batch(&tokens);
        let out = intra_reorder(&samples, m, |s| s.encoder_tokens() as f64).unwrap();
        let mut a: Vec<u64> = out.iter().map(|s| s.encoder_tokens()).collect();
        let mut b: Vec<u64> = samples.iter().map(|s| s.encoder_tokens()).collect();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn inter_is_a_deterministic_permutation((t, size) in lane_times()) {
        let l = t.microbatches();
        let order = inter_reorder(&t, &size, &InterOptions::default()).unwrap();
        prop_assert_eq!(sorted(order.clone()), (0..l).collect::<Vec<_>>());
        prop_assert_eq!(&order, &inter_reorder(&t, &size, &InterOptions::default()).unwrap());
        prop_assert_eq!(&order, &inter_reorder_vpp(&t, &size, 1, &InterOptions::default()).unwrap());
        let incremental = InterOptions { eval: IntervalEval::Incremental, ..Default::default() };
        prop_assert_eq!(&order, &inter_reorder(&t, &size, &incremental).unwrap());
    }

    #[test]
    fn every_mode_keeps_every_sample(tokens in prop::collection::vec(1u32..6000, 8), dp in prop::sample::select(vec![1u32, 2, 4]), mode in prop::sample::select(vec![ReorderMode::None, ReorderMode::Intra, ReorderMode::Inter, ReorderMode::Both])) {
        let r = disaggregated_reorder(&cost(), &plan(dp, 2, 8, 1), &batch(&tokens), &ReorderOptions { mode, ..Default::default() }).unwrap();
        prop_assert_eq!(sorted(r.output_order.clone()), (0..8).collect::<Vec<_>>());
        prop_assert!(r.lanes.iter().all(|l| l.len() == 8 / dp as usize));
        if mode == ReorderMode::None {
            prop_assert_eq!(r.t_iter_before, r.t_iter_after);
        }
    }
}
