//! Analytical GPU performance model.
//!
//! Wave-quantization accounting, the SM-scaling roofline (SRM) latency
//! bound, alpha calibration and contention-aware estimation of prefill and
//! decode latency for an [`ExecutionState`].

mod calibration;
mod estimator;
mod execution_state;

pub use calibration::{AlphaKey, CalibrationRecord, CalibrationStore, ContentionLookup, Phase, ALPHA_MAX, ALPHA_MIN};
pub use estimator::{srm_layer, update_online, Estimator, LatencyModel, PhaseLatency};
pub use execution_state::ExecutionState;

use crate::error::{invalid, Result};
use serde::{Deserialize, Serialize};

/// Hardware envelope of one GPU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpuSpec {
    pub num_sms: u32,
    /// Peak compute, FLOP/s.
    pub c_peak: f64,
    /// Peak memory bandwidth, bytes/s.
    pub d_peak: f64,
    /// Peak network bandwidth, bytes/s.
    pub w_peak: f64,
    /// SM count at which memory bandwidth saturates.
    pub n_d: u32,
    /// SM count at which network bandwidth saturates.
    pub n_w: u32,
}

impl GpuSpec {
    /// A100-SXM-80GB-like envelope: 108 SMs, dense BF16 tensor peak,
    /// memory bandwidth saturating at 30 SMs.
    pub fn a100() -> Self {
        GpuSpec {
            num_sms: 108,
            c_peak: 312e12,
            d_peak: 2.0e12,
            w_peak: 20e9,
            n_d: 30,
            n_w: 16,
        }
    }

    pub fn h100() -> Self {
        GpuSpec {
            num_sms: 132,
            c_peak: 989e12,
            d_peak: 3.35e12,
            w_peak: 600e9,
            n_d: 40,
            n_w: 24,
        }
    }

    pub fn h20() -> Self {
        GpuSpec {
            num_sms: 78,
            c_peak: 148e12,
            d_peak: 4.0e12,
            w_peak: 400e9,
            n_d: 52,
            n_w: 20,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "a100" => Some(Self::a100()),
            "h100" => Some(Self::h100()),
            "h20" => Some(Self::h20()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_sms == 0 {
            return invalid("gpu.num_sms must be >= 1");
        }
        if !(1..=self.num_sms).contains(&self.n_d) || !(1..=self.num_sms).contains(&self.n_w) {
            return invalid("gpu inflection points must lie in 1..=num_sms");
        }
        for (name, v) in [
            ("c_peak", self.c_peak),
            ("d_peak", self.d_peak),
            ("w_peak", self.w_peak),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return invalid(format!("gpu.{name} must be a positive finite rate"));
            }
        }
        Ok(())
    }
}

/// Which transformer component a kernel belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelGroup {
    Qkv,
    Attention,
    OProj,
    Mlp,
}

impl KernelGroup {
    pub const ALL: [KernelGroup; 4] = [
        KernelGroup::Qkv,
        KernelGroup::Attention,
        KernelGroup::OProj,
        KernelGroup::Mlp,
    ];

    pub fn label(self) -> &'static str {
        match self {
            KernelGroup::Qkv => "qkv",
            KernelGroup::Attention => "attn",
            KernelGroup::OProj => "o_proj",
            KernelGroup::Mlp => "mlp",
        }
    }
}

/// Work signature of a single kernel launch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelDesc {
    pub name: String,
    pub group: KernelGroup,
    pub flops: f64,
    pub mem_bytes: f64,
    pub grid_blocks: u64,
    pub blocks_per_sm: u32,
}

impl KernelDesc {
    pub fn validate(&self) -> Result<()> {
        if !(self.flops >= 0.0 && self.flops.is_finite()) {
            return invalid(format!("kernel {}: flops must be finite and >= 0", self.name));
        }
        if !(self.mem_bytes > 0.0 && self.mem_bytes.is_finite()) {
            return invalid(format!("kernel {}: mem_bytes must be > 0", self.name));
        }
        if self.grid_blocks == 0 || self.blocks_per_sm == 0 {
            return invalid(format!("kernel {}: grid and blocks-per-SM must be >= 1", self.name));
        }
        Ok(())
    }

    pub fn arithmetic_intensity(&self) -> f64 {
        self.flops / self.mem_bytes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveStats {
    pub waves: u64,
    pub tail_sms: u64,
    pub idle_ratio: f64,
}

/// Wave-quantization accounting for `grid_blocks` thread blocks on `num_sms`
/// SMs holding `blocks_per_sm` resident blocks each.
///
/// Blocks pack `blocks_per_sm` to an SM, so `tail_sms` counts SMs that
/// receive at least one block of the final wave and idleness is per SM.
pub fn wave_stats(grid_blocks: u64, blocks_per_sm: u64, num_sms: u64) -> Result<WaveStats> {
    if grid_blocks == 0 || blocks_per_sm == 0 || num_sms == 0 {
        return invalid("wave_stats requires g, b, N >= 1");
    }
    let per_wave = blocks_per_sm * num_sms;
    let waves = grid_blocks.div_ceil(per_wave);
    // ceil(g/b - N(w-1)) == ceil((g - bN(w-1)) / b) in exact integer arithmetic.
    let tail_sms = (grid_blocks - per_wave * (waves - 1)).div_ceil(blocks_per_sm);
    let idle_ratio = (num_sms - tail_sms) as f64 / (num_sms * waves) as f64;
    Ok(WaveStats {
        waves,
        tail_sms,
        idle_ratio,
    })
}

/// Compute/memory/network peaks attainable on a subset of SMs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaledPeaks {
    pub c_p: f64,
    pub d_p: f64,
    pub w_p: f64,
}

pub fn scaled_peaks(gpu: &GpuSpec, n_p: u32) -> Result<ScaledPeaks> {
    if n_p == 0 || n_p > gpu.num_sms {
        return invalid(format!("SM count {n_p} outside 1..={}", gpu.num_sms));
    }
    let n = n_p as f64;
    Ok(ScaledPeaks {
        c_p: gpu.c_peak * n / gpu.num_sms as f64,
        d_p: gpu.d_peak * (n / gpu.n_d as f64).min(1.0),
        w_p: gpu.w_peak * (n / gpu.n_w as f64).min(1.0),
    })
}

/// SRM latency of one kernel against explicit peaks.
///
/// Kernels without FLOPs are pure transfers and cost `mem_bytes / d_p`.
pub fn roofline_latency(kernel: &KernelDesc, peaks: &ScaledPeaks) -> f64 {
    if kernel.flops == 0.0 {
        return kernel.mem_bytes / peaks.d_p;
    }
    let attainable = (kernel.arithmetic_intensity() * peaks.d_p).min(peaks.c_p);
    kernel.flops / attainable
}

/// SM-scaling roofline latency of `kernel` on `n_p` SMs of `gpu`, in seconds.
pub fn srm_latency(kernel: &KernelDesc, gpu: &GpuSpec, n_p: u32) -> Result<f64> {
    kernel.validate()?;
    let peaks = scaled_peaks(gpu, n_p)?;
    Ok(roofline_latency(kernel, &peaks))
}

/// Measured-to-predicted calibration factor.
pub fn calibrate(measured: f64, predicted: f64) -> Result<f64> {
    if !(predicted > 0.0) {
        return invalid("calibrate: predicted latency must be > 0");
    }
    if !(measured > 0.0) {
        return invalid("calibrate: measured latency must be > 0");
    }
    Ok(measured / predicted)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gpu() -> GpuSpec {
        GpuSpec {
            num_sms: 108,
            c_peak: 1e14,
            d_peak: 2e12,
            w_peak: 1e11,
            n_d: 30,
            n_w: 20,
        }
    }

    fn kernel(flops: f64, mem: f64) -> KernelDesc {
        KernelDesc {
            name: "k".into(),
            group: KernelGroup::Mlp,
            flops,
            mem_bytes: mem,
            grid_blocks: 1,
            blocks_per_sm: 1,
        }
    }

    #[test]
    fn wave_exact_multiple() {
        let w = wave_stats(216, 2, 108).unwrap();
        assert_eq!((w.waves, w.tail_sms, w.idle_ratio), (1, 108, 0.0));
    }

    #[test]
    fn wave_small_tail() {
        let w = wave_stats(110, 1, 108).unwrap();
        assert_eq!((w.waves, w.tail_sms), (2, 2));
        assert_eq!(w.idle_ratio, 106.0 / 216.0);
    }

    #[test]
    fn wave_qkv_1024() {
        let w = wave_stats(384, 1, 108).unwrap();
        assert_eq!((w.waves, w.tail_sms), (4, 60));
        assert_eq!(w.idle_ratio, 48.0 / 432.0);
    }

    #[test]
    fn wave_rejects_zero() {
        assert!(wave_stats(0, 1, 108).is_err());
        assert!(wave_stats(1, 0, 108).is_err());
        assert!(wave_stats(1, 1, 0).is_err());
    }

    #[test]
    fn peaks_full_and_partial() {
        let g = gpu();
        let full = scaled_peaks(&g, 108).unwrap();
        assert_eq!((full.c_p, full.d_p, full.w_p), (g.c_peak, g.d_peak, g.w_peak));
        assert_eq!(scaled_peaks(&g, 54).unwrap().d_p, 2e12);
        assert_eq!(scaled_peaks(&g, 15).unwrap().d_p, 1e12);
        assert!(scaled_peaks(&g, 0).is_err());
        assert!(scaled_peaks(&g, 109).is_err());
    }

    #[test]
    fn srm_examples() {
        let g = gpu();
        let k = kernel(1e12, 1e9);
        assert!((srm_latency(&k, &g, 108).unwrap() - 0.010).abs() < 1e-15);
        assert!((srm_latency(&k, &g, 54).unwrap() - 0.020).abs() < 1e-15);
        let m = kernel(1e9, 1e9);
        assert!((srm_latency(&m, &g, 15).unwrap() - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn srm_pure_copy() {
        let g = gpu();
        let copy = kernel(0.0, 4e9);
        assert_eq!(srm_latency(&copy, &g, 108).unwrap(), 2e-3);
        assert_eq!(srm_latency(&copy, &g, 15).unwrap(), 4e-3);
    }

    #[test]
    fn calibrate_ratio_and_guard() {
        assert_eq!(calibrate(0.010, 0.010).unwrap(), 1.0);
        assert!((calibrate(0.012, 0.010).unwrap() - 1.2).abs() < 1e-12);
        assert!(calibrate(0.010, 0.0).is_err());
    }
}
