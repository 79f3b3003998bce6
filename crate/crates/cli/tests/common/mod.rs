#![allow(dead_code)]

use mmplan_core::cost::{AnalyticCost, CostModel, CostProfile};
use mmplan_core::model::{ArchDesc, ClusterSpec, ModelSpec, ModuleKind, ModuleMemory, ModuleSpec};

pub const TPS: [u32; 4] = [1, 2, 4, 8];

pub fn module(layers: u32, hidden: u32, ffn: u32, heads: u32, groups: u32, params: f64, act: f64) -> ModuleSpec {
    ModuleSpec {
        arch: ArchDesc { layers, hidden, ffn_hidden: ffn, heads, groups },
        memory: ModuleMemory { param_grad_bytes: 4.0 * params, optimizer_bytes: 12.0 * params, activation_bytes: act },
        frozen: false,
    }
}

/// ViT-Huge + Llama3-7B + ~1B generator, 8K sequences.
pub fn mllm9b() -> ModelSpec {
    ModelSpec {
        encoder: module(32, 1280, 5120, 16, 16, 0.63e9, 0.7e9),
        backbone: module(32, 4096, 11008, 32, 32, 7.0e9, 2.1e9),
        generator: module(28, 1536, 6144, 24, 24, 1.0e9, 1.2e9),
        seq_len: 8192,
        activation_element_bytes: 2.0,
        frozen_backward_factor: 1.0 / 3.0,
    }
}

/// ViT-Huge + Llama3-70B + ~1B generator.
pub fn mllm72b() -> ModelSpec {
    ModelSpec {
        encoder: module(32, 1280, 5120, 16, 16, 0.63e9, 2.0e9),
        backbone: module(80, 8192, 28672, 64, 8, 70.0e9, 10.7e9),
        generator: module(28, 1536, 6144, 24, 24, 1.0e9, 3.0e9),
        seq_len: 8192,
        activation_element_bytes: 2.0,
        frozen_backward_factor: 1.0 / 3.0,
    }
}

pub fn cluster(n: u32) -> ClusterSpec {
    ClusterSpec {
        total_gpus: n,
        gpus_per_node: 8,
        peak_flops: 989e12,
        gpu_mem_bytes: 80e9,
        intra_node_bw: 450e9,
        inter_node_bw: 50e9,
    }
}

pub fn analytic(model: ModelSpec, cluster: ClusterSpec) -> CostModel {
    let profile = CostProfile::analytic(AnalyticCost::from_model(&model, &cluster, 0.45));
    CostModel::new(model, cluster, profile)
}

/// Profile with `fwd = base / tp^alpha`, independent of token load.
pub fn flat_profile(base: [f64; 3], alpha: f64) -> CostProfile {
    let mut rows = Vec::new();
    for kind in ModuleKind::ALL {
        for tp in TPS {
            let f = base[kind.index()] / f64::from(tp).powf(alpha);
            rows.push((kind, tp, 0.0, f, Some(2.0 * f)));
        }
    }
    CostProfile::from_rows(&rows).unwrap()
}

/// Profile with `fwd = per_token * load / tp^alpha` (backbone: constant
/// `per_token[1] / tp^alpha`).
pub fn linear_profile(per_token: [f64; 3], alpha: f64) -> CostProfile {
    let mut rows = Vec::new();
    for kind in ModuleKind::ALL {
        for tp in TPS {
            let s = per_token[kind.index()] / f64::from(tp).powf(alpha);
            if kind == ModuleKind::Backbone {
                rows.push((kind, tp, 0.0, s, Some(2.0 * s)));
            } else {
                rows.push((kind, tp, 1.0, s, Some(2.0 * s)));
                rows.push((kind, tp, 1e6, s * 1e6, Some(2.0 * s * 1e6)));
            }
        }
    }
    CostProfile::from_rows(&rows).unwrap()
}

/// Small model whose memory never binds and whose stage boundaries carry no bytes.
pub fn light_model() -> ModelSpec {
    let m = |p: f64| ModuleSpec {
        arch: ArchDesc { layers: 4, hidden: 512, ffn_hidden: 2048, heads: 8, groups: 8 },
        memory: ModuleMemory { param_grad_bytes: p, optimizer_bytes: 2.0 * p, activation_bytes: p / 10.0 },
        frozen: false,
    };
    ModelSpec {
        encoder: m(1e9),
        backbone: m(8e9),
        generator: m(1e9),
        seq_len: 4096,
        activation_element_bytes: 0.0,
        frozen_backward_factor: 1.0 / 3.0,
    }
}
