use crate::error::{invalid, Result};
use serde::{Deserialize, Serialize};

/// Shape of a decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub num_layers: u32,
    pub hidden: u64,
    pub num_heads: u64,
    pub num_kv_heads: u64,
    pub head_dim: u64,
    pub intermediate: u64,
    pub dtype_bytes: u64,
    /// Fraction of MLP parameters active per token (1.0 for dense models).
    #[serde(default = "one")]
    pub activated_fraction: f64,
}

fn one() -> f64 {
    1.0
}

impl ModelSpec {
    pub fn llama3_8b() -> Self {
        ModelSpec {
            num_layers: 32,
            hidden: 4096,
            num_heads: 32,
            num_kv_heads: 8,
            head_dim: 128,
            intermediate: 14336,
            dtype_bytes: 2,
            activated_fraction: 1.0,
        }
    }

    pub fn llama3_70b() -> Self {
        ModelSpec {
            num_layers: 80,
            hidden: 8192,
            num_heads: 64,
            num_kv_heads: 8,
            head_dim: 128,
            intermediate: 28672,
            dtype_bytes: 2,
            activated_fraction: 1.0,
        }
    }

    /// Sparse MoE in FP8, approximated as one wide MLP with 8 of 128
    /// experts active per token.
    pub fn moe_fp8() -> Self {
        ModelSpec {
            num_layers: 94,
            hidden: 4096,
            num_heads: 32,
            num_kv_heads: 4,
            head_dim: 128,
            intermediate: 128 * 1536,
            dtype_bytes: 1,
            activated_fraction: 8.0 / 128.0,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "llama-3.1-8b" | "llama3-8b" => Some(Self::llama3_8b()),
            "llama-3.1-70b" | "llama3-70b" => Some(Self::llama3_70b()),
            "moe-fp8" => Some(Self::moe_fp8()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_layers", self.num_layers as u64),
            ("hidden", self.hidden),
            ("num_heads", self.num_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("head_dim", self.head_dim),
            ("intermediate", self.intermediate),
            ("dtype_bytes", self.dtype_bytes),
        ];
        for (name, v) in counts {
            if v == 0 {
                return invalid(format!("model.{name} must be >= 1"));
            }
        }
        if self.hidden != self.num_heads * self.head_dim {
            return invalid("model.hidden must equal num_heads * head_dim");
        }
        if !self.num_heads.is_multiple_of(self.num_kv_heads) {
            return invalid("model.num_kv_heads must divide num_heads");
        }
        if !(self.activated_fraction > 0.0 && self.activated_fraction <= 1.0) {
            return invalid("model.activated_fraction must lie in (0, 1]");
        }
        Ok(())
    }

    /// Width of the concatenated K and V projections for one token.
    pub fn kv_dim(&self) -> u64 {
        self.num_kv_heads * self.head_dim
    }

    pub fn qkv_out(&self) -> u64 {
        self.hidden + 2 * self.kv_dim()
    }

    /// Total parameter bytes of the transformer layers.
    pub fn weight_bytes(&self) -> u64 {
        let per_layer = self.hidden * self.qkv_out() + self.hidden * self.hidden + 3 * self.hidden * self.intermediate;
        per_layer * self.num_layers as u64 * self.dtype_bytes
    }
}

/// KV-cache footprint of `tokens` tokens across all layers.
pub fn kv_bytes(model: &ModelSpec, tokens: u64) -> u64 {
    2 * model.num_layers as u64 * tokens * model.kv_dim() * model.dtype_bytes
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for m in [ModelSpec::llama3_8b(), ModelSpec::llama3_70b(), ModelSpec::moe_fp8()] {
            m.validate().unwrap();
        }
    }

    #[test]
    fn kv_bytes_examples() {
        let m = ModelSpec::llama3_8b();
        assert_eq!(kv_bytes(&m, 0), 0);
        assert_eq!(kv_bytes(&m, 1), 131072);
        assert_eq!(kv_bytes(&m, 2048), 2048 * 131072);
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut m = ModelSpec::llama3_8b();
        m.hidden = 4000;
        assert!(m.validate().is_err());
        let mut m = ModelSpec::llama3_8b();
        m.num_kv_heads = 5;
        assert!(m.validate().is_err());
        let mut m = ModelSpec::llama3_8b();
        m.activated_fraction = 0.0;
        assert!(m.validate().is_err());
    }
}
