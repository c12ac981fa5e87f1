//! Discrete-event serving simulation driven by a ground-truth latency oracle.

pub mod calibration;
mod metrics;
mod oracle;
mod records;
pub mod report;
mod sim;

pub use calibration::{
    decode_probe, dense_grid, evaluate, prefill_probe, profile, two_per_decade, CalibrationPlan, CalibrationSamples,
    MapeReport,
};
pub use metrics::{compute_metrics, request_metrics, Aggregates, MetricsReport, RequestMetrics};
pub use oracle::{AlphaCoeffs, GroundTruthOracle, OracleConfig, ORACLE_MAX_TOKENS};
pub use records::{KvPool, RequestRecord, RequestState};
pub use sim::{
    run, run_chunked, run_static, validate_trace, Audit, ChunkRef, IterationRecord, Policy, Predictor, SimConfig,
    SimOutput, TimelineRow,
};

#[cfg(test)]
pub(crate) fn oracle_for_tests() -> GroundTruthOracle {
    GroundTruthOracle::new(
        crate::perf_model::GpuSpec::a100(),
        crate::workload::ModelSpec::llama3_8b(),
        OracleConfig::default(),
        0.0,
    )
}
