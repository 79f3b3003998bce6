//! TOML configuration files. Physical quantities carry their unit in the key
//! name (`_bytes`, `_flops_per_s`, `_bytes_per_s`).

use std::path::{Path, PathBuf};

use mmplan_core::cost::{AnalyticCost, CostModel, CostProfile};
use mmplan_core::model::{ArchDesc, ClusterSpec, ModelSpec, ModuleKind, ModuleMemory, ModuleSpec, Sample};
use mmplan_core::workload::{ingest_trace, synth_batch, WorkloadSpec};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleConfig {
    pub layers: u32,
    pub hidden: u32,
    pub ffn_hidden: u32,
    pub heads: u32,
    pub groups: u32,
    pub param_grad_bytes: f64,
    pub optimizer_bytes: f64,
    pub activation_bytes: f64,
    #[serde(default)]
    pub frozen: bool,
}

impl ModuleConfig {
    fn spec(&self) -> ModuleSpec {
        ModuleSpec {
            arch: ArchDesc {
                layers: self.layers,
                hidden: self.hidden,
                ffn_hidden: self.ffn_hidden,
                heads: self.heads,
                groups: self.groups,
            },
            memory: ModuleMemory {
                param_grad_bytes: self.param_grad_bytes,
                optimizer_bytes: self.optimizer_bytes,
                activation_bytes: self.activation_bytes,
            },
            frozen: self.frozen,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    /// CSV rows `module,tp,token_load,forward_s,backward_s`, relative to the
    /// model file.
    pub profile_csv: Option<PathBuf>,
    /// Fraction of peak used by the analytic estimate for modules without rows.
    pub analytic_efficiency: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub seq_len: u32,
    #[serde(default = "default_element_bytes")]
    pub activation_element_bytes: f64,
    #[serde(default = "default_frozen_factor")]
    pub frozen_backward_factor: f64,
    pub encoder: ModuleConfig,
    pub backbone: ModuleConfig,
    pub generator: ModuleConfig,
    #[serde(default)]
    pub cost: CostConfig,
}

fn default_element_bytes() -> f64 {
    2.0
}

fn default_frozen_factor() -> f64 {
    1.0 / 3.0
}

pub const DEFAULT_ANALYTIC_EFFICIENCY: f64 = 0.5;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub total_gpus: u32,
    pub gpus_per_node: u32,
    pub peak_flops_per_s: f64,
    pub gpu_mem_bytes: f64,
    pub intra_node_bw_bytes_per_s: f64,
    pub inter_node_bw_bytes_per_s: f64,
}

impl ClusterConfig {
    pub fn spec(&self) -> ClusterSpec {
        ClusterSpec {
            total_gpus: self.total_gpus,
            gpus_per_node: self.gpus_per_node,
            peak_flops: self.peak_flops_per_s,
            gpu_mem_bytes: self.gpu_mem_bytes,
            intra_node_bw: self.intra_node_bw_bytes_per_s,
            inter_node_bw: self.inter_node_bw_bytes_per_s,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn parse_toml<T: for<'de> Deserialize<'de>>(path: &Path, bytes: &[u8]) -> Result<T, CliError> {
    let text = std::str::from_utf8(bytes).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Model, cluster and cost profile ready for planning.
#[derive(Debug, Clone)]
pub struct Setup {
    pub cost: CostModel,
    /// Modules timed by the analytic estimate rather than profile rows.
    pub analytic_modules: Vec<ModuleKind>,
    pub model_sha256: String,
    pub cluster_sha256: String,
}

impl Setup {
    pub fn load(model_path: &Path, cluster_path: &Path) -> Result<Self, CliError> {
        let model_bytes = read(model_path)?;
        let mc: ModelConfig = parse_toml(model_path, &model_bytes)?;
        let cluster_bytes = read(cluster_path)?;
        let cc: ClusterConfig = parse_toml(cluster_path, &cluster_bytes)?;
        let model = ModelSpec {
            encoder: mc.encoder.spec(),
            backbone: mc.backbone.spec(),
            generator: mc.generator.spec(),
            seq_len: mc.seq_len,
            activation_element_bytes: mc.activation_element_bytes,
            frozen_backward_factor: mc.frozen_backward_factor,
        };
        model.validate().map_err(|e| CliError::Config(format!("{}: {e}", model_path.display())))?;
        let cluster = cc.spec();
        cluster.validate().map_err(|e| CliError::Config(format!("{}: {e}", cluster_path.display())))?;

        let mut hasher = Sha256::new();
        hasher.update(&model_bytes);
        let mut profile = CostProfile::new();
        if let Some(rel) = &mc.cost.profile_csv {
            let path = model_path.parent().unwrap_or(Path::new(".")).join(rel);
            let bytes = read(&path)?;
            hasher.update(&bytes);
            profile = CostProfile::from_csv(bytes.as_slice()).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        }
        let efficiency = mc.cost.analytic_efficiency.unwrap_or(DEFAULT_ANALYTIC_EFFICIENCY);
        if !(efficiency > 0.0 && efficiency <= 1.0) {
            return Err(CliError::Config(format!("analytic_efficiency must be in (0, 1], got {efficiency}")));
        }
        profile = profile.with_analytic(AnalyticCost::from_model(&model, &cluster, efficiency));
        let analytic_modules = ModuleKind::ALL
            .into_iter()
            .filter(|k| cluster.tp_choices().any(|tp| profile.uses_analytic(*k, tp)))
            .collect();
        Ok(Setup {
            cost: CostModel::new(model, cluster, profile),
            analytic_modules,
            model_sha256: hex::encode(hasher.finalize()),
            cluster_sha256: sha256_hex(&cluster_bytes),
        })
    }

    pub fn seq_len(&self) -> u32 {
        self.cost.model.seq_len
    }
}

/// A global batch read from a trace or drawn from a synthetic spec.
#[derive(Debug, Clone)]
pub struct Workload {
    pub samples: Vec<Sample>,
    pub sha256: String,
    /// Seed actually used, for synthetic workloads.
    pub seed: Option<u64>,
}

impl Workload {
    /// `.jsonl` files are traces (the first `bs` records are used); anything
    /// else is parsed as a TOML synthetic spec, with `seed` overriding the
    /// file's seed.
    pub fn load(path: &Path, bs: usize, seed: Option<u64>, seq_len: u32) -> Result<Self, CliError> {
        let bytes = read(path)?;
        let sha256 = sha256_hex(&bytes);
        let is_trace = path.extension().is_some_and(|e| e == "jsonl");
        let (samples, seed) = if is_trace {
            let mut samples = ingest_trace(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            if samples.len() < bs {
                return Err(CliError::Config(format!("{} holds {} samples, batch size is {bs}", path.display(), samples.len())));
            }
            samples.truncate(bs);
            (samples, None)
        } else {
            let mut spec: WorkloadSpec = parse_toml(path, &bytes)?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            if spec.seq_len != seq_len {
                return Err(CliError::Config(format!("workload seq_len {} differs from model seq_len {seq_len}", spec.seq_len)));
            }
            let samples = synth_batch(&spec, bs).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            (samples, Some(spec.seed))
        };
        for (i, s) in samples.iter().enumerate() {
            s.check(Some(seq_len)).map_err(|e| CliError::Config(format!("{} sample {i}: {e}", path.display())))?;
        }
        Ok(Workload { samples, sha256, seed })
    }

    /// Synthetic spec file without the seq_len cross-check, for `generate`.
    pub fn spec(path: &Path) -> Result<(WorkloadSpec, String), CliError> {
        let bytes = read(path)?;
        Ok((parse_toml(path, &bytes)?, sha256_hex(&bytes)))
    }
}
