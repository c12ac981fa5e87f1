use crate::error::{invalid, Result};
use crate::workload::SeqSpan;
use serde::{Deserialize, Serialize};

/// The six co-execution factors that determine prefill and decode latency.
///
/// `prefill_prefix` carries per-sequence tokens already resident in the KV
/// cache (non-zero only for chunked prefill). Batch sizes are derived from the
/// length vectors, so the batch/length invariant holds by construction.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExecutionState {
    pub prefill_lens: Vec<u64>,
    #[serde(default)]
    pub prefill_prefix: Vec<u64>,
    pub prefill_sms: u32,
    pub decode_ctx_lens: Vec<u64>,
    pub decode_sms: u32,
}

impl ExecutionState {
    pub fn prefill_only(lens: Vec<u64>, sms: u32) -> Self {
        ExecutionState {
            prefill_lens: lens,
            prefill_sms: sms,
            ..Default::default()
        }
    }

    pub fn decode_only(ctx_lens: Vec<u64>, sms: u32) -> Self {
        ExecutionState {
            decode_ctx_lens: ctx_lens,
            decode_sms: sms,
            ..Default::default()
        }
    }

    pub fn prefill_batch(&self) -> usize {
        self.prefill_lens.len()
    }

    pub fn decode_batch(&self) -> usize {
        self.decode_ctx_lens.len()
    }

    pub fn prefill_active(&self) -> bool {
        self.prefill_sms > 0 && !self.prefill_lens.is_empty()
    }

    pub fn decode_active(&self) -> bool {
        self.decode_sms > 0 && !self.decode_ctx_lens.is_empty()
    }

    /// Σ sl_i, the prefill token scale used for calibration keys.
    pub fn prefill_tokens(&self) -> u64 {
        self.prefill_lens.iter().sum()
    }

    /// Σ cl_i, the decode token scale used for calibration keys.
    pub fn decode_tokens(&self) -> u64 {
        self.decode_ctx_lens.iter().sum()
    }

    pub fn prefix_of(&self, i: usize) -> u64 {
        self.prefill_prefix.get(i).copied().unwrap_or(0)
    }

    pub fn prefill_spans(&self) -> Vec<SeqSpan> {
        self.prefill_lens
            .iter()
            .enumerate()
            .map(|(i, &new)| SeqSpan::chunk(self.prefix_of(i), new))
            .collect()
    }

    pub fn decode_spans(&self) -> Vec<SeqSpan> {
        self.decode_ctx_lens.iter().map(|&c| SeqSpan::decode(c)).collect()
    }

    pub fn validate(&self, num_sms: u32) -> Result<()> {
        if self.prefill_sms > num_sms || self.decode_sms > num_sms {
            return invalid(format!(
                "execution state SMs ({}, {}) exceed GPU SM count {num_sms}",
                self.prefill_sms, self.decode_sms
            ));
        }
        if !self.prefill_prefix.is_empty() && self.prefill_prefix.len() != self.prefill_lens.len() {
            return invalid("prefill_prefix must be empty or match prefill_lens");
        }
        if self.prefill_lens.contains(&0) || self.decode_ctx_lens.contains(&0) {
            return invalid("sequence lengths must be >= 1");
        }
        Ok(())
    }
}
