//! Domain types shared by the planner, the cost model, the reorderer and the
//! pipeline simulator.
//!
//! Everything here is an immutable value once constructed. Plans are checked
//! with [`validate_plan`], which reports every violated constraint rather than
//! stopping at the first one.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::memory_check;

/// Tensor-parallel sizes a parallelism unit may use.
pub const ALLOWED_TP: [u32; 4] = [1, 2, 4, 8];

/// The three parallelism units of a multimodal LLM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleKind {
    Encoder,
    Backbone,
    Generator,
}

impl ModuleKind {
    /// Pipeline order: encoder stages feed the backbone, which feeds the generator.
    pub const ALL: [ModuleKind; 3] = [ModuleKind::Encoder, ModuleKind::Backbone, ModuleKind::Generator];

    pub fn as_str(self) -> &'static str {
        match self {
            ModuleKind::Encoder => "encoder",
            ModuleKind::Backbone => "backbone",
            ModuleKind::Generator => "generator",
        }
    }

    pub fn index(self) -> usize {
        match self {
            ModuleKind::Encoder => 0,
            ModuleKind::Backbone => 1,
            ModuleKind::Generator => 2,
        }
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModuleKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "encoder" | "me" => Ok(ModuleKind::Encoder),
            "backbone" | "llm" | "lm" => Ok(ModuleKind::Backbone),
            "generator" | "mg" => Ok(ModuleKind::Generator),
            other => Err(format!("unknown module kind `{other}`")),
        }
    }
}

/// Transformer shape of one module.
///
/// Parameter and FLOP counts assume a pre-norm block with grouped-query
/// attention and a gated (three-matrix) MLP. Embeddings are not counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDesc {
    pub layers: u32,
    pub hidden: u32,
    pub ffn_hidden: u32,
    pub heads: u32,
    /// Key/value head groups.
    pub groups: u32,
}

impl ArchDesc {
    pub fn kv_dim(&self) -> f64 {
        f64::from(self.hidden) / f64::from(self.heads) * f64::from(self.groups)
    }

    /// Weights per transformer layer.
    pub fn params_per_layer(&self) -> f64 {
        let h = f64::from(self.hidden);
        let ffn = f64::from(self.ffn_hidden);
        2.0 * h * h + 2.0 * h * self.kv_dim() + 3.0 * h * ffn
    }

    pub fn params(&self) -> f64 {
        f64::from(self.layers) * self.params_per_layer()
    }

    /// Forward FLOPs for one attention context of `tokens` tokens: dense
    /// matmuls plus the score and value products over the full context.
    pub fn forward_flops(&self, tokens: f64) -> f64 {
        let dense = 2.0 * self.params() * tokens;
        let attention = 4.0 * f64::from(self.layers) * f64::from(self.hidden) * tokens * tokens;
        dense + attention
    }

    fn is_positive(&self) -> bool {
        self.layers > 0 && self.hidden > 0 && self.ffn_hidden > 0 && self.heads > 0 && self.groups > 0
    }
}

/// Memory triple for one module, all in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModuleMemory {
    /// Parameters plus gradients for the whole module.
    pub param_grad_bytes: f64,
    /// Optimizer states for the whole module (sharded across DP by ZeRO-1).
    pub optimizer_bytes: f64,
    /// Activations of one microbatch across the whole module.
    pub activation_bytes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleSpec {
    pub arch: ArchDesc,
    pub memory: ModuleMemory,
    /// Frozen modules skip weight gradients and updates.
    #[serde(default)]
    pub frozen: bool,
}

/// Architecture, memory and training-shape description of the whole model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub encoder: ModuleSpec,
    pub backbone: ModuleSpec,
    pub generator: ModuleSpec,
    /// Fixed training sequence length seen by the backbone.
    pub seq_len: u32,
    /// Bytes per activation element sent across a pipeline boundary.
    #[serde(default = "default_activation_element_bytes")]
    pub activation_element_bytes: f64,
    /// Backward-time multiplier applied to frozen modules.
    #[serde(default = "default_frozen_backward_factor")]
    pub frozen_backward_factor: f64,
}

fn default_activation_element_bytes() -> f64 {
    2.0
}

fn default_frozen_backward_factor() -> f64 {
    1.0 / 3.0
}

impl ModelSpec {
    pub fn module(&self, kind: ModuleKind) -> &ModuleSpec {
        match kind {
            ModuleKind::Encoder => &self.encoder,
            ModuleKind::Backbone => &self.backbone,
            ModuleKind::Generator => &self.generator,
        }
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        if self.seq_len == 0 {
            return Err(SpecError::new("seq_len must be positive"));
        }
        if !(self.activation_element_bytes >= 0.0) {
            return Err(SpecError::new("activation_element_bytes must be non-negative"));
        }
        if !(self.frozen_backward_factor >= 0.0) {
            return Err(SpecError::new("frozen_backward_factor must be non-negative"));
        }
        for kind in ModuleKind::ALL {
            let m = self.module(kind);
            if !m.arch.is_positive() {
                return Err(SpecError::new(format!("{kind}: architecture fields must be positive")));
            }
            if !m.arch.hidden.is_multiple_of(m.arch.heads) {
                return Err(SpecError::new(format!("{kind}: hidden must be divisible by heads")));
            }
            let mem = m.memory;
            let positive = mem.param_grad_bytes > 0.0 && mem.optimizer_bytes > 0.0;
            if !positive || !(mem.activation_bytes >= 0.0) {
                return Err(SpecError::new(format!("{kind}: memory sizes must be positive")));
            }
        }
        Ok(())
    }
}

/// Hardware description of the cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub total_gpus: u32,
    pub gpus_per_node: u32,
    /// Peak FLOP/s of one GPU.
    pub peak_flops: f64,
    pub gpu_mem_bytes: f64,
    /// Bytes per second.
    pub intra_node_bw: f64,
    /// Bytes per second.
    pub inter_node_bw: f64,
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        if self.total_gpus < 3 {
            return Err(SpecError::new("total_gpus must be at least 3 (one per unit)"));
        }
        if self.gpus_per_node == 0 {
            return Err(SpecError::new("gpus_per_node must be positive"));
        }
        let all_positive = [self.peak_flops, self.gpu_mem_bytes, self.intra_node_bw, self.inter_node_bw]
            .iter()
            .all(|v| *v > 0.0 && v.is_finite());
        if !all_positive {
            return Err(SpecError::new("peak flops, memory and bandwidths must be positive"));
        }
        Ok(())
    }

    /// TP sizes usable on this cluster (TP never spans nodes).
    pub fn tp_choices(&self) -> impl Iterator<Item = u32> + '_ {
        ALLOWED_TP.into_iter().filter(move |tp| *tp <= self.gpus_per_node)
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("invalid configuration: {0}")]
pub struct SpecError(pub String);

impl SpecError {
    pub fn new(msg: impl Into<String>) -> Self {
        SpecError(msg.into())
    }
}

/// TP/DP/PP sizes of one parallelism unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParallelismChoice {
    pub tp: u32,
    pub dp: u32,
    pub pp: u32,
}

impl ParallelismChoice {
    pub fn new(tp: u32, dp: u32, pp: u32) -> Self {
        ParallelismChoice { tp, dp, pp }
    }

    pub fn gpus(&self) -> u32 {
        self.tp * self.dp * self.pp
    }
}

/// GPU counts per unit, `(x, y, z)` for encoder, backbone and generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    pub encoder: u32,
    pub backbone: u32,
    pub generator: u32,
}

impl Allocation {
    pub fn total(&self) -> u32 {
        self.encoder + self.backbone + self.generator
    }

    pub fn get(&self, kind: ModuleKind) -> u32 {
        match kind {
            ModuleKind::Encoder => self.encoder,
            ModuleKind::Backbone => self.backbone,
            ModuleKind::Generator => self.generator,
        }
    }
}

/// Resource allocation and parallelism for every unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub alloc: Allocation,
    pub encoder: ParallelismChoice,
    pub backbone: ParallelismChoice,
    pub generator: ParallelismChoice,
    pub global_batch: u32,
    /// Virtual pipeline size; 1 is plain 1F1B.
    #[serde(default = "one")]
    pub vpp: u32,
}

fn one() -> u32 {
    1
}

impl Plan {
    /// Builds a plan whose allocation is derived from the parallelism sizes.
    pub fn from_choices(
        encoder: ParallelismChoice,
        backbone: ParallelismChoice,
        generator: ParallelismChoice,
        global_batch: u32,
        vpp: u32,
    ) -> Self {
        Plan {
            alloc: Allocation {
                encoder: encoder.gpus(),
                backbone: backbone.gpus(),
                generator: generator.gpus(),
            },
            encoder,
            backbone,
            generator,
            global_batch,
            vpp,
        }
    }

    pub fn choice(&self, kind: ModuleKind) -> ParallelismChoice {
        match kind {
            ModuleKind::Encoder => self.encoder,
            ModuleKind::Backbone => self.backbone,
            ModuleKind::Generator => self.generator,
        }
    }

    pub fn total_gpus(&self) -> u32 {
        self.alloc.total()
    }

    /// Total physical pipeline stages across the three units.
    pub fn total_stages(&self) -> u32 {
        self.encoder.pp + self.backbone.pp + self.generator.pp
    }

    /// Microbatches per backbone DP group, `BS / DP_lm`.
    pub fn microbatches(&self) -> u32 {
        self.global_batch / self.backbone.dp.max(1)
    }

    /// Encoder/generator microbatch multiplier `DP_lm / DP_unit`; 1 for the backbone.
    pub fn coupling(&self, kind: ModuleKind) -> f64 {
        match kind {
            ModuleKind::Backbone => 1.0,
            _ => f64::from(self.backbone.dp) / f64::from(self.choice(kind).dp),
        }
    }
}

/// Named constraint violations reported by [`validate_plan`].
#[derive(Debug, Clone, PartialEq, Error, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlanViolation {
    #[error("allocation uses {used} GPUs but the cluster has {available}")]
    ResourceExceeded { used: u32, available: u32 },
    #[error("divisibility violated: {detail}")]
    DivisibilityViolated { detail: String },
    #[error("{unit} needs {bytes_per_gpu:.3e} bytes per GPU, capacity is {capacity:.3e}")]
    MemoryExceeded { unit: ModuleKind, bytes_per_gpu: f64, capacity: f64 },
    #[error("{unit} uses TP={tp}, allowed sizes are 1, 2, 4, 8 within one node")]
    TpNotAllowed { unit: ModuleKind, tp: u32 },
    #[error("malformed plan: {detail}")]
    InvalidShape { detail: String },
}

/// Checks every plan invariant and the per-unit memory constraint.
///
/// Returns the plan unchanged when valid, otherwise the full list of violations.
pub fn validate_plan(plan: &Plan, cluster: &ClusterSpec, model: &ModelSpec) -> Result<Plan, Vec<PlanViolation>> {
    let mut violations = Vec::new();

    for kind in ModuleKind::ALL {
        let c = plan.choice(kind);
        if c.tp == 0 || c.dp == 0 || c.pp == 0 {
            violations.push(PlanViolation::InvalidShape {
                detail: format!("{kind}: TP, DP and PP must all be at least 1"),
            });
            continue;
        }
        if !ALLOWED_TP.contains(&c.tp) || c.tp > cluster.gpus_per_node {
            violations.push(PlanViolation::TpNotAllowed { unit: kind, tp: c.tp });
        }
        if c.gpus() != plan.alloc.get(kind) {
            violations.push(PlanViolation::InvalidShape {
                detail: format!("{kind}: TP*DP*PP = {} but {} GPUs allocated", c.gpus(), plan.alloc.get(kind)),
            });
        }
    }
    if plan.global_batch == 0 {
        violations.push(PlanViolation::InvalidShape { detail: "global batch must be positive".into() });
    }
    if plan.vpp == 0 {
        violations.push(PlanViolation::InvalidShape { detail: "vpp must be at least 1".into() });
    }
    if violations.iter().any(|v| matches!(v, PlanViolation::InvalidShape { .. })) {
        return Err(violations);
    }

    if plan.total_gpus() > cluster.total_gpus {
        violations.push(PlanViolation::ResourceExceeded {
            used: plan.total_gpus(),
            available: cluster.total_gpus,
        });
    }
    let dp_lm = plan.backbone.dp;
    if !plan.global_batch.is_multiple_of(dp_lm) {
        violations.push(PlanViolation::DivisibilityViolated {
            detail: format!("DP_lm={dp_lm} does not divide BS={}", plan.global_batch),
        });
    }
    for kind in [ModuleKind::Encoder, ModuleKind::Generator] {
        let dp = plan.choice(kind).dp;
        if !dp_lm.is_multiple_of(dp) {
            violations.push(PlanViolation::DivisibilityViolated {
                detail: format!("{kind} DP={dp} does not divide DP_lm={dp_lm}"),
            });
        }
    }
    for unit in memory_check(plan, model, cluster).units {
        if !unit.fits {
            violations.push(PlanViolation::MemoryExceeded {
                unit: unit.kind,
                bytes_per_gpu: unit.bytes_per_gpu,
                capacity: cluster.gpu_mem_bytes,
            });
        }
    }

    if violations.is_empty() {
        Ok(plan.clone())
    } else {
        Err(violations)
    }
}

/// One training sequence, described by its token composition.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub text_tokens: u32,
    pub image_subseqs: Vec<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub audio_subseqs: Vec<u32>,
}

impl Sample {
    pub fn text(tokens: u32) -> Self {
        Sample { text_tokens: tokens, image_subseqs: Vec::new(), audio_subseqs: Vec::new() }
    }

    pub fn with_images(text_tokens: u32, image_subseqs: Vec<u32>) -> Self {
        Sample { text_tokens, image_subseqs, audio_subseqs: Vec::new() }
    }

    /// Modality subsequences, in the order they are routed to the encoder and generator.
    pub fn modality_subseqs(&self) -> impl Iterator<Item = u32> + '_ {
        self.image_subseqs.iter().chain(self.audio_subseqs.iter()).copied()
    }

    pub fn modality_tokens(&self) -> u64 {
        self.modality_subseqs().map(u64::from).sum()
    }

    /// Token load seen by the encoder.
    pub fn encoder_tokens(&self) -> u64 {
        self.modality_tokens()
    }

    /// Token load seen by the generator. Modality subsequences are both
    /// understood and generated, so this matches the encoder load.
    pub fn generator_tokens(&self) -> u64 {
        self.modality_tokens()
    }

    pub fn total_tokens(&self) -> u64 {
        u64::from(self.text_tokens) + self.modality_tokens()
    }

    /// Checks the sample against its invariants for a given sequence cap.
    pub fn check(&self, seq_cap: Option<u32>) -> Result<(), String> {
        let total = self.total_tokens();
        if total == 0 {
            return Err("sample has no tokens".into());
        }
        if let Some(cap) = seq_cap {
            if total > u64::from(cap) {
                return Err(format!("sample has {total} tokens, sequence cap is {cap}"));
            }
        }
        Ok(())
    }
}

/// Samples occupying one pipeline slot, with their derived token loads.
///
/// The backbone sees one fixed-length sequence per slot regardless of how
/// the modality tokens are distributed; encoder and generator loads follow
/// the modality tokens of the contained samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Microbatch {
    /// Positions of the samples in the global batch.
    pub sample_ids: Vec<usize>,
    pub samples: Vec<Sample>,
    pub encoder_tokens: u64,
    pub generator_tokens: u64,
}

impl Microbatch {
    pub fn new(sample_ids: Vec<usize>, samples: Vec<Sample>) -> Self {
        debug_assert_eq!(sample_ids.len(), samples.len());
        let encoder_tokens = samples.iter().map(Sample::encoder_tokens).sum();
        let generator_tokens = samples.iter().map(Sample::generator_tokens).sum();
        Microbatch { sample_ids, samples, encoder_tokens, generator_tokens }
    }

    pub fn single(id: usize, sample: Sample) -> Self {
        Microbatch::new(vec![id], vec![sample])
    }

    pub fn token_load(&self, kind: ModuleKind, seq_len: u32) -> f64 {
        match kind {
            ModuleKind::Encoder => self.encoder_tokens as f64,
            ModuleKind::Backbone => f64::from(seq_len),
            ModuleKind::Generator => self.generator_tokens as f64,
        }
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn arch(layers: u32, hidden: u32) -> ArchDesc {
        ArchDesc { layers, hidden, ffn_hidden: hidden * 4, heads: 8, groups: 8 }
    }

    pub fn module(p: f64, s: f64, l: f64) -> ModuleSpec {
        ModuleSpec {
            arch: arch(4, 512),
            memory: ModuleMemory { param_grad_bytes: p, optimizer_bytes: s, activation_bytes: l },
            frozen: false,
        }
    }

    pub fn small_model() -> ModelSpec {
        ModelSpec {
            encoder: module(1e9, 2e9, 1e8),
            backbone: module(8e9, 16e9, 1e9),
            generator: module(1e9, 2e9, 1e8),
            seq_len: 4096,
            activation_element_bytes: 2.0,
            frozen_backward_factor: 1.0 / 3.0,
        }
    }

    pub fn cluster(n: u32) -> ClusterSpec {
        ClusterSpec {
            total_gpus: n,
            gpus_per_node: 8,
            peak_flops: 1e15,
            gpu_mem_bytes: 80e9,
            intra_node_bw: 1e11,
            inter_node_bw: 2.5e10,
        }
    }
}
