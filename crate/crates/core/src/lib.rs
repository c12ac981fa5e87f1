//! Performance model and deterministic discrete-event simulator for LLM
//! serving with concurrent prefill/decode execution on partitioned GPU
//! streaming multiprocessors (SMs).
//!
//! The crate is organised bottom-up:
//!
//! - [`perf_model`]: wave quantization, the SM-scaling roofline (SRM),
//!   calibration factors and contention-aware latency estimation.
//! - [`workload`]: transformer kernel decomposition, KV-cache accounting,
//!   chunked-prefill planning and Poisson trace generation.
//! - [`scheduler`]: SLO-aware prefill/decode scheduling and SM partition
//!   decisions.
//! - [`engine`]: the event-driven simulator, ground-truth latency oracle,
//!   baseline policies and metrics.
//! - [`config`]: file-backed experiment configuration.

pub mod config;
pub mod engine;
mod error;
pub mod perf_model;
pub mod scheduler;
pub mod stats;
pub mod workload;

pub use error::{Error, Result};
