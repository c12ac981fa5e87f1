//! Sparse offline profiling against the oracle and held-out accuracy checks.

use super::oracle::GroundTruthOracle;
use crate::error::{invalid, Result};
use crate::perf_model::{CalibrationStore, Estimator, ExecutionState, GpuSpec, Phase};
use crate::stats::mape;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Which (SMs, tokens) points to profile for each phase and which
/// (SMs, co-running prefill length) points to profile for contention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationPlan {
    pub prefill_sms: Vec<u32>,
    pub prefill_tokens: Vec<u64>,
    pub decode_sms: Vec<u32>,
    pub decode_tokens: Vec<u64>,
    #[serde(default)]
    pub contention_sms: Vec<u32>,
    #[serde(default)]
    pub contention_lens: Vec<u64>,
}

/// Sample budget for the scheduler's estimator.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CalibrationSamples {
    /// Dense-sampling limit: the estimator sees the noise-free oracle.
    All,
    /// [`CalibrationPlan::default_for`] the simulated GPU.
    #[default]
    Default,
    Sparse(CalibrationPlan),
}

/// Two token samples per decade, `1·10^k` and `3·10^k`, from `10^lo` up to `10^hi`.
pub fn two_per_decade(lo: u32, hi: u32) -> Vec<u64> {
    let mut out = Vec::new();
    for k in lo..hi {
        let base = 10u64.pow(k);
        out.push(base);
        out.push(3 * base);
    }
    out.push(10u64.pow(hi));
    out
}

impl CalibrationPlan {
    pub fn default_for(gpu: &GpuSpec) -> Self {
        let n = gpu.num_sms;
        CalibrationPlan {
            prefill_sms: vec![n / 2, n],
            prefill_tokens: vec![128, 512, 2048, 8192, 32768],
            decode_sms: vec![(n / 12).max(1), n / 2],
            decode_tokens: two_per_decade(2, 7),
            contention_sms: vec![(n / 24).max(1), (n / 6).max(1), n / 2],
            contention_lens: vec![1024, 4096, 16384],
        }
    }

    /// Every SM count and token scale of [`dense_grid`] at `sm_step`.
    pub fn dense_for(gpu: &GpuSpec, sm_step: u32) -> Self {
        let step = sm_step.max(1);
        let sms: Vec<u32> = (1..=gpu.num_sms / step).map(|i| i * step).collect();
        CalibrationPlan {
            prefill_sms: sms.clone(),
            prefill_tokens: (7..=15).map(|e| 1u64 << e).collect(),
            decode_sms: sms.clone(),
            decode_tokens: (7..=23).map(|e| 1u64 << e).collect(),
            contention_sms: sms,
            contention_lens: vec![1024, 4096, 16384],
        }
    }

    pub fn validate(&self, gpu: &GpuSpec) -> Result<()> {
        for (phase, sms, tokens) in [
            ("prefill", &self.prefill_sms, &self.prefill_tokens),
            ("decode", &self.decode_sms, &self.decode_tokens),
        ] {
            if sms.len() * tokens.len() < 2 {
                return invalid(format!("calibration budget for {phase} needs at least 2 samples"));
            }
            if sms.iter().any(|&s| s == 0 || s > gpu.num_sms) {
                return invalid(format!("calibration {phase} SM counts must lie in 1..={}", gpu.num_sms));
            }
            if tokens.contains(&0) {
                return invalid(format!("calibration {phase} token scales must be >= 1"));
            }
        }
        if self.contention_sms.iter().any(|&s| s == 0 || s > gpu.num_sms) {
            return invalid("calibration contention SM counts out of range");
        }
        Ok(())
    }
}

/// A representative decode batch holding roughly `tokens` context tokens.
pub fn decode_probe(tokens: u64, sms: u32) -> ExecutionState {
    let bs = (tokens / 1024).clamp(1, 256);
    let ctx = tokens.div_ceil(bs).max(1);
    ExecutionState::decode_only(vec![ctx; bs as usize], sms)
}

pub fn prefill_probe(tokens: u64, sms: u32) -> ExecutionState {
    ExecutionState::prefill_only(vec![tokens], sms)
}

/// Profile `plan` against the oracle and return the fitted store.
pub fn profile<R: Rng>(oracle: &GroundTruthOracle, plan: &CalibrationPlan, rng: &mut R) -> Result<CalibrationStore> {
    plan.validate(&oracle.gpu)?;
    let bare = Estimator::new(oracle.gpu.clone(), oracle.model.clone(), CalibrationStore::new());
    let mut store = CalibrationStore::new();
    for &sms in &plan.prefill_sms {
        for &t in &plan.prefill_tokens {
            let es = prefill_probe(t, sms);
            let measured = oracle.measure(&es, rng)?.prefill_layer_s;
            let predicted = bare.srm_prediction(Phase::Prefill, &es)?;
            store.insert_sample(Estimator::key(Phase::Prefill, &es), measured, predicted)?;
        }
    }
    for &sms in &plan.decode_sms {
        for &t in &plan.decode_tokens {
            let es = decode_probe(t, sms);
            let measured = oracle.measure(&es, rng)?.decode_step_s;
            let predicted = bare.srm_prediction(Phase::Decode, &es)?;
            store.insert_sample(Estimator::key(Phase::Decode, &es), measured, predicted)?;
        }
    }
    for &sms in &plan.contention_sms {
        for &len in &plan.contention_lens {
            let bw = oracle.contention_bandwidth(sms, len)? * oracle.noise(rng);
            let cap = crate::perf_model::scaled_peaks(&oracle.gpu, sms)?.d_p;
            store.insert_contention(sms, len, bw.min(cap))?;
        }
    }
    Ok(store)
}

/// Held-out accuracy of an estimator against the noise-free oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapeReport {
    pub prefill_mape: f64,
    pub prefill_points: usize,
    pub decode_mape: f64,
    pub decode_points: usize,
}

/// Dense evaluation grid: SMs on every `sm_step`, prefill lengths and
/// decode (batch, context) pairs on powers of two up to 32k context and
/// batch 256.
pub fn dense_grid(gpu: &GpuSpec, sm_step: u32) -> (Vec<ExecutionState>, Vec<ExecutionState>) {
    let step = sm_step.max(1);
    let sms: Vec<u32> = (1..=gpu.num_sms / step).map(|i| i * step).collect();
    let mut prefill = Vec::new();
    let mut decode = Vec::new();
    for &p in &sms {
        for sl in (7..=15).map(|e| 1u64 << e) {
            prefill.push(prefill_probe(sl, p));
        }
        for bs in (0..=8).map(|e| 1usize << e) {
            for cl in (7..=15).map(|e| 1u64 << e) {
                decode.push(ExecutionState::decode_only(vec![cl; bs], p));
            }
        }
    }
    (prefill, decode)
}

pub fn evaluate(
    est: &Estimator,
    oracle: &GroundTruthOracle,
    prefill: &[ExecutionState],
    decode: &[ExecutionState],
) -> Result<MapeReport> {
    let mut pa = Vec::with_capacity(prefill.len());
    let mut pp = Vec::with_capacity(prefill.len());
    for es in prefill {
        pa.push(oracle.prefill_layer(es)?);
        pp.push(est.estimate_latency(es)?.prefill_layer_s);
    }
    let mut da = Vec::with_capacity(decode.len());
    let mut dp = Vec::with_capacity(decode.len());
    for es in decode {
        da.push(oracle.decode_step(es)?);
        dp.push(est.estimate_latency(es)?.decode_step_s);
    }
    Ok(MapeReport {
        prefill_mape: mape(&pa, &pp).unwrap_or(0.0),
        prefill_points: pa.len(),
        decode_mape: mape(&da, &dp).unwrap_or(0.0),
        decode_points: da.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::oracle::OracleConfig;
    use crate::workload::ModelSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn decade_grid() {
        assert_eq!(two_per_decade(2, 4), vec![100, 300, 1000, 3000, 10000]);
    }

    #[test]
    fn budget_below_two_is_rejected() {
        let gpu = GpuSpec::a100();
        let mut plan = CalibrationPlan::default_for(&gpu);
        plan.decode_sms = vec![10];
        plan.decode_tokens = vec![1000];
        assert!(plan.validate(&gpu).is_err());
    }

    #[test]
    fn noiseless_samples_are_exact_at_their_keys() {
        let gpu = GpuSpec::a100();
        let oracle = GroundTruthOracle::new(gpu.clone(), ModelSpec::llama3_8b(), OracleConfig::default(), 0.0);
        let plan = CalibrationPlan::default_for(&gpu);
        let store = profile(&oracle, &plan, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let est = Estimator::new(gpu, ModelSpec::llama3_8b(), store);
        let es = decode_probe(30_000, plan.decode_sms[0]);
        let want = oracle.decode_step(&es).unwrap();
        let got = est.estimate_latency(&es).unwrap().decode_step_s;
        assert!((got - want).abs() < 1e-12 * want);
    }
}
