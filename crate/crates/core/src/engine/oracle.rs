//! Ground-truth latency oracle standing in for hardware measurements.
//!
//! Latency = SRM bound x a smooth alpha surface, with decode bandwidth
//! reduced by a contention surface while prefill co-runs, and optional
//! multiplicative lognormal measurement noise.

use crate::error::{invalid, Result};
use crate::perf_model::{scaled_peaks, srm_layer, ExecutionState, GpuSpec, LatencyModel, Phase, PhaseLatency};
use crate::workload::{hybrid_layer_kernels, ModelSpec, SeqSpan, Tiling};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// `alpha(p, tokens) = a0 + a1 * p / N + a2 * ln(1 + tokens)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaCoeffs {
    pub a0: f64,
    pub a1: f64,
    pub a2: f64,
}

impl AlphaCoeffs {
    pub fn eval(&self, sm_fraction: f64, tokens: u64) -> f64 {
        self.a0 + self.a1 * sm_fraction + self.a2 * (1.0 + tokens as f64).ln()
    }
}

/// Largest token scale the oracle guarantees a positive alpha for.
pub const ORACLE_MAX_TOKENS: u64 = 1 << 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub prefill: AlphaCoeffs,
    pub decode: AlphaCoeffs,
    /// Maximum fractional bandwidth loss under prefill co-execution.
    pub contention_beta: f64,
    /// Co-running prefill length at which half of `contention_beta` applies.
    pub contention_half_len: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            // small prefill batches run further from the roofline
            prefill: AlphaCoeffs {
                a0: 2.23,
                a1: 0.05,
                a2: -0.12,
            },
            decode: AlphaCoeffs {
                a0: 1.05,
                a1: 0.25,
                a2: 0.015,
            },
            contention_beta: 0.3,
            contention_half_len: 8192.0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, c) in [("prefill", self.prefill), ("decode", self.decode)] {
            // alpha is affine in each variable, so its minimum is at a corner
            let corners = [(0.0, 0), (1.0, 0), (0.0, ORACLE_MAX_TOKENS), (1.0, ORACLE_MAX_TOKENS)];
            if corners.iter().any(|&(f, t)| !(c.eval(f, t) > 0.0)) {
                return invalid(format!("oracle.{name}: alpha surface must stay positive"));
            }
        }
        if !(0.0..1.0).contains(&self.contention_beta) || !(self.contention_half_len > 0.0) {
            return invalid("oracle contention needs 0 <= beta < 1 and half_len > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GroundTruthOracle {
    pub gpu: GpuSpec,
    pub model: ModelSpec,
    pub tiling: Tiling,
    pub cfg: OracleConfig,
    pub noise_sigma: f64,
}

impl GroundTruthOracle {
    pub fn new(gpu: GpuSpec, model: ModelSpec, cfg: OracleConfig, noise_sigma: f64) -> Self {
        GroundTruthOracle {
            gpu,
            model,
            tiling: Tiling::default(),
            cfg,
            noise_sigma,
        }
    }

    pub fn alpha(&self, phase: Phase, sms: u32, tokens: u64) -> f64 {
        let frac = sms as f64 / self.gpu.num_sms as f64;
        match phase {
            Phase::Prefill => self.cfg.prefill.eval(frac, tokens),
            Phase::Decode => self.cfg.decode.eval(frac, tokens),
        }
    }

    /// True attainable memory bandwidth on `sms` SMs next to a prefill of
    /// `co_prefill_len` tokens.
    pub fn contention_bandwidth(&self, sms: u32, co_prefill_len: u64) -> Result<f64> {
        let d_p = scaled_peaks(&self.gpu, sms)?.d_p;
        let sl = co_prefill_len as f64;
        Ok(d_p * (1.0 - self.cfg.contention_beta * sl / (sl + self.cfg.contention_half_len)))
    }

    /// Noise-free latency of one prefill layer.
    pub fn prefill_layer(&self, es: &ExecutionState) -> Result<f64> {
        let spans = es.prefill_spans();
        let srm = srm_layer(
            &self.gpu,
            &self.model,
            &self.tiling,
            Phase::Prefill,
            &spans,
            es.prefill_sms,
            None,
        )?;
        Ok(srm * self.alpha(Phase::Prefill, es.prefill_sms, es.prefill_tokens()))
    }

    /// Noise-free latency of one full-model decode step.
    pub fn decode_step(&self, es: &ExecutionState) -> Result<f64> {
        let spans = es.decode_spans();
        let bw = if es.prefill_active() {
            Some(self.contention_bandwidth(es.decode_sms, es.prefill_tokens())?)
        } else {
            None
        };
        let srm = srm_layer(
            &self.gpu,
            &self.model,
            &self.tiling,
            Phase::Decode,
            &spans,
            es.decode_sms,
            bw,
        )?;
        Ok(srm * self.model.num_layers as f64 * self.alpha(Phase::Decode, es.decode_sms, es.decode_tokens()))
    }

    /// Noise-free latency of a full-model lockstep hybrid batch on all SMs.
    pub fn hybrid_iteration(&self, prefill: &[SeqSpan], decode: &[SeqSpan]) -> Result<f64> {
        let n = self.gpu.num_sms;
        let peaks = scaled_peaks(&self.gpu, n)?;
        let kernels = hybrid_layer_kernels(&self.model, prefill, decode)?;
        let layer: f64 = kernels
            .iter()
            .map(|k| crate::perf_model::roofline_latency(k, &peaks))
            .sum();
        let alpha = if prefill.is_empty() {
            let ctx: u64 = decode.iter().map(|s| s.cached + s.new).sum();
            self.alpha(Phase::Decode, n, ctx)
        } else {
            let tokens: u64 = prefill.iter().chain(decode).map(|s| s.new).sum();
            self.alpha(Phase::Prefill, n, tokens)
        };
        Ok(layer * alpha * self.model.num_layers as f64)
    }

    /// Multiplicative lognormal noise factor.
    pub fn noise<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.noise_sigma == 0.0 {
            return 1.0;
        }
        let z: f64 = StandardNormal.sample(rng);
        (self.noise_sigma * z).exp()
    }

    /// A "measurement": noise-free latency of each active phase times an
    /// independent noise draw.
    pub fn measure<R: Rng>(&self, es: &ExecutionState, rng: &mut R) -> Result<PhaseLatency> {
        let mut out = self.exact(es)?;
        if es.prefill_active() {
            out.prefill_layer_s *= self.noise(rng);
        }
        if es.decode_active() {
            out.decode_step_s *= self.noise(rng);
        }
        Ok(out)
    }

    pub fn exact(&self, es: &ExecutionState) -> Result<PhaseLatency> {
        es.validate(self.gpu.num_sms)?;
        if !es.prefill_active() && !es.decode_active() {
            return invalid("oracle: both phases are inactive");
        }
        let mut out = PhaseLatency::default();
        if es.prefill_active() {
            out.prefill_layer_s = self.prefill_layer(es)?;
        }
        if es.decode_active() {
            out.decode_step_s = self.decode_step(es)?;
        }
        Ok(out)
    }
}

impl LatencyModel for GroundTruthOracle {
    fn gpu(&self) -> &GpuSpec {
        &self.gpu
    }

    fn model(&self) -> &ModelSpec {
        &self.model
    }

    fn estimate(&self, es: &ExecutionState) -> Result<PhaseLatency> {
        self.exact(es)
    }
}
