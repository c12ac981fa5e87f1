//! Transformer workload arithmetic: model shapes, per-kernel FLOP/byte
//! decomposition, KV-cache sizing, chunked-prefill planning and synthetic
//! request traces.

mod chunk;
mod kernels;
mod model;
mod trace;

pub use chunk::{chunk_plan, ChunkPlan};
pub use kernels::{
    batch_intensity, hybrid_layer_kernels, layer_kernels, layer_kernels_with, wave_profile, KernelWave, SeqSpan,
    Tiling, WaveProfile,
};
pub use model::{kv_bytes, ModelSpec};
pub use trace::{gen_poisson_trace, read_trace, write_trace, LenDist, LengthSampler, Request};
