//! MoE transformer shape descriptions and the built-in model presets.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bytes per weight/activation element (FP16).
pub const BYTES_PER_ELEMENT: u64 = 2;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("top_k = {top_k} must be in 1..={n_experts}")]
    TopK { top_k: usize, n_experts: usize },
    #[error("model must have at least one layer")]
    NoLayers,
    #[error("model must have at least one routed expert")]
    NoExperts,
    #[error("model dimension `{0}` must be positive")]
    ZeroDim(&'static str),
    #[error(
        "unknown model preset `{0}` (expected qwen3-30b-a3b, olmoe-1b-7b or deepseek-moe-16b)"
    )]
    UnknownPreset(String),
}

/// Shape of an MoE decoder stack. Only the dimensions that drive FLOP and
/// byte accounting are modelled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    pub n_layers: usize,
    pub n_routed_experts: usize,
    pub n_shared_experts: usize,
    pub top_k: usize,
    pub hidden_size: usize,
    /// Intermediate width of one routed expert.
    pub expert_ffn_dim: usize,
    /// Intermediate width of one shared expert.
    #[serde(default)]
    pub shared_expert_ffn_dim: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    /// Documentation only.
    #[serde(default)]
    pub total_params: u64,
    /// Documentation only.
    #[serde(default)]
    pub activated_params: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_layers == 0 {
            return Err(ModelError::NoLayers);
        }
        if self.n_routed_experts == 0 {
            return Err(ModelError::NoExperts);
        }
        if self.top_k == 0 || self.top_k > self.n_routed_experts {
            return Err(ModelError::TopK {
                top_k: self.top_k,
                n_experts: self.n_routed_experts,
            });
        }
        for (name, v) in [
            ("hidden_size", self.hidden_size),
            ("expert_ffn_dim", self.expert_ffn_dim),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("head_dim", self.head_dim),
        ] {
            if v == 0 {
                return Err(ModelError::ZeroDim(name));
            }
        }
        if self.n_shared_experts > 0 && self.shared_expert_ffn_dim == 0 {
            return Err(ModelError::ZeroDim("shared_expert_ffn_dim"));
        }
        Ok(())
    }

    pub fn preset(name: &str) -> Result<ModelSpec, ModelError> {
        match name {
            "qwen3-30b-a3b" => Ok(Self::qwen3_30b_a3b()),
            "olmoe-1b-7b" => Ok(Self::olmoe_1b_7b()),
            "deepseek-moe-16b" => Ok(Self::deepseek_moe_16b()),
            other => Err(ModelError::UnknownPreset(other.to_string())),
        }
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["qwen3-30b-a3b", "olmoe-1b-7b", "deepseek-moe-16b"]
    }

    pub fn qwen3_30b_a3b() -> Self {
        Self {
            name: "qwen3-30b-a3b".into(),
            n_layers: 48,
            n_routed_experts: 128,
            n_shared_experts: 0,
            top_k: 8,
            hidden_size: 2048,
            expert_ffn_dim: 768,
            shared_expert_ffn_dim: 0,
            n_heads: 32,
            n_kv_heads: 4,
            head_dim: 128,
            total_params: 30_500_000_000,
            activated_params: 3_300_000_000,
        }
    }

    pub fn olmoe_1b_7b() -> Self {
        Self {
            name: "olmoe-1b-7b".into(),
            n_layers: 16,
            n_routed_experts: 64,
            n_shared_experts: 0,
            top_k: 8,
            hidden_size: 2048,
            expert_ffn_dim: 1024,
            shared_expert_ffn_dim: 0,
            n_heads: 16,
            n_kv_heads: 16,
            head_dim: 128,
            total_params: 6_920_000_000,
            activated_params: 1_300_000_000,
        }
    }

    pub fn deepseek_moe_16b() -> Self {
        Self {
            name: "deepseek-moe-16b".into(),
            n_layers: 28,
            n_routed_experts: 64,
            n_shared_experts: 2,
            top_k: 6,
            hidden_size: 2048,
            expert_ffn_dim: 1408,
            shared_expert_ffn_dim: 1408,
            n_heads: 16,
            n_kv_heads: 16,
            head_dim: 128,
            total_params: 16_400_000_000,
            activated_params: 2_700_000_000,
        }
    }

    fn q_dim(&self) -> u64 {
        (self.n_heads * self.head_dim) as u64
    }

    fn kv_dim(&self) -> u64 {
        (self.n_kv_heads * self.head_dim) as u64
    }

    /// Parameters of the attention projections plus router and shared experts.
    /// Everything that lives on the attention chiplet.
    pub fn attention_block_params(&self) -> u64 {
        let h = self.hidden_size as u64;
        let qkv = h * (self.q_dim() + 2 * self.kv_dim());
        let out = self.q_dim() * h;
        let router = h * self.n_routed_experts as u64;
        let shared = self.n_shared_experts as u64 * 3 * h * self.shared_expert_ffn_dim as u64;
        qkv + out + router + shared
    }

    /// Parameters of one routed expert (gate, up and down projections).
    pub fn expert_params(&self) -> u64 {
        3 * self.hidden_size as u64 * self.expert_ffn_dim as u64
    }

    pub fn expert_weight_bytes(&self) -> u64 {
        self.expert_params() * BYTES_PER_ELEMENT
    }

    pub fn attention_weight_bytes(&self) -> u64 {
        self.attention_block_params() * BYTES_PER_ELEMENT
    }

    /// Forward FLOPs of the attention-chiplet work for one token at the given
    /// sequence length: projections, scores, router and shared experts.
    pub fn attention_flops_per_token(&self, seq_len: usize) -> f64 {
        let h = self.hidden_size as f64;
        let q = self.q_dim() as f64;
        let kv = self.kv_dim() as f64;
        let proj = 2.0 * h * (q + 2.0 * kv) + 2.0 * q * h;
        let scores = 4.0 * seq_len as f64 * q;
        let router = 2.0 * h * self.n_routed_experts as f64;
        let shared = self.n_shared_experts as f64 * 6.0 * h * self.shared_expert_ffn_dim as f64;
        proj + scores + router + shared
    }

    /// Forward FLOPs of one routed expert for one token.
    pub fn expert_flops_per_token(&self) -> f64 {
        6.0 * self.hidden_size as f64 * self.expert_ffn_dim as f64
    }

    /// Activation bytes kept per token by the attention block.
    pub fn attention_activation_bytes_per_token(&self) -> u64 {
        let h = self.hidden_size as u64;
        (h + self.q_dim() + 2 * self.kv_dim()) * BYTES_PER_ELEMENT
    }

    /// Activation bytes kept per routed token-replica by an expert.
    pub fn expert_activation_bytes_per_token(&self) -> u64 {
        (self.hidden_size as u64 + 2 * self.expert_ffn_dim as u64) * BYTES_PER_ELEMENT
    }

    /// Bytes of one hidden-state vector on the wire.
    pub fn token_bytes(&self) -> u64 {
        self.hidden_size as u64 * BYTES_PER_ELEMENT
    }

    /// SRAM working set of one attention micro-batch: input and output hidden
    /// states plus one head's score matrix per sample. Saved activations are
    /// streamed out to DRAM and not counted.
    pub fn attention_sram_footprint(&self, tokens: u64, samples: u64, seq_len: u64) -> u64 {
        let act = tokens * 2 * self.hidden_size as u64 * BYTES_PER_ELEMENT;
        let scores = samples * seq_len * seq_len * BYTES_PER_ELEMENT;
        act + scores
    }

    /// SRAM working set of one expert processing `tokens` routed tokens.
    pub fn expert_sram_footprint(&self, tokens: u64) -> u64 {
        let h = self.hidden_size as u64;
        tokens * (2 * h + 2 * self.expert_ffn_dim as u64) * BYTES_PER_ELEMENT
    }
}
