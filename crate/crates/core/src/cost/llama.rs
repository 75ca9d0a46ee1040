use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::CostMethod;

/// Bytes per megabyte (binary).
pub const BYTES_PER_MB: f64 = 1024.0 * 1024.0;
const BYTES_PER_VALUE: u64 = 2;

/// Which weight matrices a projection method compresses. Everything else
/// (embeddings, output head, norms, and any linear layer switched off here)
/// is trained full-rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub attention: bool,
    pub mlp: bool,
}

impl Default for Partition {
    fn default() -> Self {
        Partition {
            attention: true,
            mlp: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlamaConfig {
    pub seq_len: u64,
    pub batch: u64,
    pub hidden: u64,
    pub layers: u64,
    pub heads: u64,
    pub vocab: u64,
    pub intermediate: u64,
    pub rank: u64,
    pub partition: Partition,
}

impl LlamaConfig {
    pub const PRESETS: [&'static str; 5] = ["60m", "350m", "1b", "7b", "13b"];

    /// Standard sizes with sequence length 256, batch 1, vocabulary 32000 and
    /// rank 128.
    pub fn preset(name: &str) -> Result<Self> {
        let (hidden, intermediate, heads, layers) = match name {
            "60m" => (512, 1376, 8, 8),
            "350m" => (1024, 2736, 16, 24),
            "1b" => (2048, 5461, 24, 32),
            "7b" => (4096, 11008, 32, 32),
            "13b" => (5120, 13824, 40, 40),
            other => return Err(Error::invalid(format!("unknown model preset {other:?}"))),
        };
        Ok(LlamaConfig {
            seq_len: 256,
            batch: 1,
            hidden,
            layers,
            heads,
            vocab: 32000,
            intermediate,
            rank: 128,
            partition: Partition::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.seq_len,
            self.batch,
            self.hidden,
            self.layers,
            self.heads,
            self.vocab,
            self.intermediate,
            self.rank,
        ];
        if fields.contains(&0) {
            return Err(Error::invalid("all model dimensions must be positive"));
        }
        if self.rank > self.hidden {
            return Err(Error::invalid("rank exceeds the hidden size"));
        }
        Ok(())
    }

    /// `(rows, cols, projectable)` of every linear weight in one block.
    fn block_linears(&self) -> Vec<(u64, u64, bool)> {
        let (d, i) = (self.hidden, self.intermediate);
        let mut out = vec![(d, d, self.partition.attention); 4];
        out.push((i, d, self.partition.mlp));
        out.push((i, d, self.partition.mlp));
        out.push((d, i, self.partition.mlp));
        out
    }

    /// Total parameter count: embeddings, output head, block linears and
    /// RMSNorm weights.
    pub fn param_count(&self) -> u64 {
        let per_block: u64 = self.block_linears().iter().map(|(m, n, _)| m * n).sum::<u64>() + 2 * self.hidden;
        2 * self.vocab * self.hidden + self.layers * per_block + self.hidden
    }

    /// Activation bytes from the per-layer formula block (BF16, so every term
    /// carries its own factor of 2).
    pub fn activation_bytes(&self) -> u64 {
        let (b, l, d, h, v) = (self.batch, self.seq_len, self.hidden, self.heads, self.vocab);
        let emb = b * l * d;
        let layer_norm = b * l * d * 2;
        let qkv = emb * 2;
        let qkt = 2 * emb * 2;
        let softmax = b * h * l * l * 2;
        let pv = softmax / 2 + emb * 2;
        let out_proj = emb * 2;
        let attention = layer_norm + qkv + qkt + softmax + pv + out_proj;
        let ff1 = emb * 2;
        let gelu = emb * 4 * 2;
        let ff2 = emb * 4 * 2;
        let feed_forward = layer_norm + ff1 + gelu + ff2;
        let final_layer = emb * 2;
        let model = layer_norm + self.layers * (attention + feed_forward) + final_layer;
        let cross_entropy = b * l * v * 2 + b * l * v * 4;
        model + cross_entropy
    }
}

/// Memory estimate in bytes, per component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    pub activation: u64,
    pub parameter: u64,
    pub gradient: u64,
    pub optimizer: u64,
    /// Workspace for the largest single parameter tensor.
    pub extra: u64,
}

impl MemoryBreakdown {
    pub fn total(&self) -> u64 {
        self.activation + self.parameter + self.gradient + self.optimizer + self.extra
    }

    pub fn mb(bytes: u64) -> f64 {
        bytes as f64 / BYTES_PER_MB
    }
}

/// Training memory of a LLaMA-style model under `method`.
///
/// Projected linears use the per-matrix memory forms with the projection on
/// the smaller side; all other parameters cost `1x` gradient and `2x` Adam
/// state.
pub fn estimate_llama_memory(cfg: &LlamaConfig, method: CostMethod) -> Result<MemoryBreakdown> {
    cfg.validate()?;
    let r = cfg.rank;
    let total = cfg.param_count();
    let mut projected = 0u64;
    let mut extra_params = 0u64;
    let mut grad = 0u64;
    let mut opt = 0u64;
    let mut linears = 0u64;
    for (a, b, proj) in cfg.block_linears() {
        if !proj {
            continue;
        }
        let (small, large) = (a.min(b), a.max(b));
        let count = a * b * cfg.layers;
        projected += count;
        linears += cfg.layers;
        let per = match method {
            CostMethod::Full => (small * large, 2 * small * large, 0),
            CostMethod::Grass => (r * large, 2 * r + 2 * r * large, 0),
            CostMethod::EfficientGaLore => (r * large, small * r + 2 * r * large, 0),
            CostMethod::GaLore | CostMethod::Flora => (small * large, small * r + 2 * r * large, 0),
            CostMethod::LoRA | CostMethod::ReLoRA => {
                let adaptor = small * r + large * r;
                (adaptor, 2 * adaptor, adaptor)
            }
        };
        grad += per.0 * cfg.layers;
        opt += per.1 * cfg.layers;
        extra_params += per.2 * cfg.layers;
    }
    let rest = total - projected;
    grad += rest;
    opt += 2 * rest;
    let mut activation = cfg.activation_bytes();
    if matches!(method, CostMethod::LoRA | CostMethod::ReLoRA) {
        activation += 2 * cfg.batch * cfg.seq_len * r * linears;
    }
    Ok(MemoryBreakdown {
        activation,
        parameter: (total + extra_params) * BYTES_PER_VALUE,
        gradient: grad * BYTES_PER_VALUE,
        optimizer: opt * BYTES_PER_VALUE,
        extra: cfg.vocab.max(cfg.intermediate) * cfg.hidden * BYTES_PER_VALUE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thirteen_b_parameter_count() {
        let cfg = LlamaConfig::preset("13b").unwrap();
        assert_eq!(cfg.param_count(), 13_015_864_320);
    }

    #[test]
    fn activation_is_linear_in_batch() {
        let mut cfg = LlamaConfig::preset("1b").unwrap();
        let one = cfg.activation_bytes();
        cfg.batch = 2;
        assert_eq!(cfg.activation_bytes(), 2 * one);
    }

    #[test]
    fn degenerate_but_legal() {
        let mut cfg = LlamaConfig::preset("60m").unwrap();
        cfg.seq_len = 1;
        let m = estimate_llama_memory(&cfg, CostMethod::Grass).unwrap();
        assert!(m.activation > 0 && m.total() > 0);
        cfg.batch = 0;
        assert!(estimate_llama_memory(&cfg, CostMethod::Grass).is_err());
    }

    #[test]
    fn full_rank_gradient_equals_parameters() {
        let cfg = LlamaConfig::preset("350m").unwrap();
        let m = estimate_llama_memory(&cfg, CostMethod::Full).unwrap();
        assert_eq!(m.gradient, m.parameter);
        assert_eq!(m.optimizer, 2 * m.parameter);
    }
}
