use super::{roofline_latency, scaled_peaks, AlphaKey, CalibrationStore, ExecutionState, GpuSpec, Phase};
use crate::error::{invalid, Result};
use crate::workload::{layer_kernels_with, ModelSpec, SeqSpan, Tiling};
use serde::{Deserialize, Serialize};

/// Estimated latencies for the active phases of an execution state.
/// Inactive phases report zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseLatency {
    /// One transformer layer of the prefill batch, seconds.
    pub prefill_layer_s: f64,
    /// One full-model decode step, seconds.
    pub decode_step_s: f64,
}

/// Anything that can predict phase latencies for an execution state.
///
/// The scheduler is written against this trait so it can be driven by the
/// calibrated estimator, the ground-truth oracle, or a synthetic model.
pub trait LatencyModel {
    fn gpu(&self) -> &GpuSpec;
    fn model(&self) -> &ModelSpec;
    fn num_layers(&self) -> u32 {
        self.model().num_layers
    }
    fn estimate(&self, es: &ExecutionState) -> Result<PhaseLatency>;
}

/// Uncalibrated SRM latency of one layer of `phase` work on `sms` SMs,
/// optionally replacing the memory bandwidth with a contended value.
pub fn srm_layer(
    gpu: &GpuSpec,
    model: &ModelSpec,
    tiling: &Tiling,
    phase: Phase,
    spans: &[SeqSpan],
    sms: u32,
    bandwidth: Option<f64>,
) -> Result<f64> {
    let mut peaks = scaled_peaks(gpu, sms)?;
    if let Some(bw) = bandwidth {
        peaks.d_p = bw;
    }
    let kernels = layer_kernels_with(model, tiling, phase, spans)?;
    Ok(kernels.iter().map(|k| roofline_latency(k, &peaks)).sum())
}

/// SRM latency model calibrated by a [`CalibrationStore`].
#[derive(Debug, Clone)]
pub struct Estimator {
    pub gpu: GpuSpec,
    pub model: ModelSpec,
    pub tiling: Tiling,
    pub store: CalibrationStore,
}

impl Estimator {
    pub fn new(gpu: GpuSpec, model: ModelSpec, store: CalibrationStore) -> Self {
        Estimator {
            gpu,
            model,
            tiling: Tiling::default(),
            store,
        }
    }

    /// Calibration key of `phase` within `es`.
    pub fn key(phase: Phase, es: &ExecutionState) -> AlphaKey {
        match phase {
            Phase::Prefill => AlphaKey {
                phase,
                sms: es.prefill_sms,
                tokens: es.prefill_tokens(),
            },
            Phase::Decode => AlphaKey {
                phase,
                sms: es.decode_sms,
                tokens: es.decode_tokens(),
            },
        }
    }

    /// Uncalibrated prediction: per-layer for prefill, per-step for decode.
    pub fn srm_prediction(&self, phase: Phase, es: &ExecutionState) -> Result<f64> {
        match phase {
            Phase::Prefill => srm_layer(
                &self.gpu,
                &self.model,
                &self.tiling,
                Phase::Prefill,
                &es.prefill_spans(),
                es.prefill_sms,
                None,
            ),
            Phase::Decode => {
                let bw = if es.prefill_active() {
                    Some(
                        self.store
                            .contention_bandwidth(&self.gpu, es.decode_sms, es.prefill_tokens())?
                            .bytes_per_s,
                    )
                } else {
                    None
                };
                let layer = srm_layer(
                    &self.gpu,
                    &self.model,
                    &self.tiling,
                    Phase::Decode,
                    &es.decode_spans(),
                    es.decode_sms,
                    bw,
                )?;
                Ok(layer * self.model.num_layers as f64)
            }
        }
    }

    /// Calibrated per-layer prefill and per-step decode latency.
    pub fn estimate_latency(&self, es: &ExecutionState) -> Result<PhaseLatency> {
        es.validate(self.gpu.num_sms)?;
        if !es.prefill_active() && !es.decode_active() {
            return invalid("estimate_latency: both phases are inactive");
        }
        let mut out = PhaseLatency::default();
        if es.prefill_active() {
            let alpha = self.store.alpha(Self::key(Phase::Prefill, es));
            out.prefill_layer_s = alpha * self.srm_prediction(Phase::Prefill, es)?;
        }
        if es.decode_active() {
            let alpha = self.store.alpha(Self::key(Phase::Decode, es));
            out.decode_step_s = alpha * self.srm_prediction(Phase::Decode, es)?;
        }
        Ok(out)
    }

    /// Record a measurement of `phase` at `es`. `measured_s` is per-layer for
    /// prefill and per-step for decode, matching [`Estimator::estimate_latency`].
    pub fn update_online(&mut self, phase: Phase, es: &ExecutionState, measured_s: f64) -> Result<()> {
        let predicted = self.srm_prediction(phase, es)?;
        update_online(&mut self.store, phase, es, measured_s, predicted)
    }
}

/// Insert (or overwrite) the alpha sample for `phase` at the key of `es`.
pub fn update_online(
    store: &mut CalibrationStore,
    phase: Phase,
    es: &ExecutionState,
    measured_s: f64,
    predicted_s: f64,
) -> Result<()> {
    store.insert_sample(Estimator::key(phase, es), measured_s, predicted_s)
}

impl LatencyModel for Estimator {
    fn gpu(&self) -> &GpuSpec {
        &self.gpu
    }

    fn model(&self) -> &ModelSpec {
        &self.model
    }

    fn estimate(&self, es: &ExecutionState) -> Result<PhaseLatency> {
        self.estimate_latency(es)
    }
}
