use super::ModelSpec;
use crate::error::{invalid, Result};
use crate::perf_model::{wave_stats, GpuSpec, KernelDesc, KernelGroup, Phase, WaveStats};
use serde::{Deserialize, Serialize};

/// Tokens of one sequence processed in a layer pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqSpan {
    /// Tokens already resident in the KV cache.
    pub cached: u64,
    /// Tokens computed in this pass.
    pub new: u64,
}

impl SeqSpan {
    pub fn prefill(new: u64) -> Self {
        SeqSpan { cached: 0, new }
    }

    pub fn chunk(cached: u64, new: u64) -> Self {
        SeqSpan { cached, new }
    }

    /// One decode token against a context of `ctx` tokens (itself included).
    pub fn decode(ctx: u64) -> Self {
        SeqSpan {
            cached: ctx.saturating_sub(1),
            new: 1,
        }
    }
}

/// Thread-block tiling rules used to derive grid sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tiling {
    pub gemm_tile_m: u64,
    pub gemm_tile_n: u64,
    pub attn_q_tile: u64,
    pub gemm_blocks_per_sm: u32,
    pub attn_blocks_per_sm: u32,
}

impl Default for Tiling {
    fn default() -> Self {
        Tiling {
            gemm_tile_m: 128,
            gemm_tile_n: 128,
            attn_q_tile: 128,
            gemm_blocks_per_sm: 1,
            attn_blocks_per_sm: 1,
        }
    }
}

/// Per-layer kernels for a batch of sequences in one phase.
pub fn layer_kernels(model: &ModelSpec, phase: Phase, seqs: &[SeqSpan]) -> Result<Vec<KernelDesc>> {
    layer_kernels_with(model, &Tiling::default(), phase, seqs)
}

pub fn layer_kernels_with(
    model: &ModelSpec,
    tiling: &Tiling,
    phase: Phase,
    seqs: &[SeqSpan],
) -> Result<Vec<KernelDesc>> {
    match phase {
        Phase::Prefill => hybrid_with(model, tiling, seqs, &[]),
        Phase::Decode => {
            if seqs.iter().any(|s| s.new != 1) {
                return invalid("decode spans process exactly one token per sequence");
            }
            hybrid_with(model, tiling, &[], seqs)
        }
    }
}

/// Kernels of one lockstep hybrid batch: GEMMs run over the concatenated
/// prefill and decode tokens; the two attention flavours launch separately.
pub fn hybrid_layer_kernels(model: &ModelSpec, prefill: &[SeqSpan], decode: &[SeqSpan]) -> Result<Vec<KernelDesc>> {
    hybrid_with(model, &Tiling::default(), prefill, decode)
}

fn hybrid_with(model: &ModelSpec, tiling: &Tiling, prefill: &[SeqSpan], decode: &[SeqSpan]) -> Result<Vec<KernelDesc>> {
    if prefill.is_empty() && decode.is_empty() {
        return invalid("layer_kernels needs at least one sequence");
    }
    if prefill.iter().chain(decode).any(|s| s.new == 0) {
        return invalid("every sequence must process at least one token");
    }
    let m: u64 = prefill.iter().chain(decode).map(|s| s.new).sum();
    let d = model.dtype_bytes as f64;
    let h = model.hidden;
    // input RMSNorm read + write, folded into the QKV projection
    let norm_bytes = 2.0 * (m * h) as f64 * d;

    let mut qkv = gemm(tiling, "qkv_proj", KernelGroup::Qkv, m, model.qkv_out(), h, d, 1.0);
    qkv.mem_bytes += norm_bytes;
    let mut out = vec![qkv];
    if !prefill.is_empty() {
        out.push(attention(model, tiling, "attn_prefill", prefill, 0.5));
    }
    if !decode.is_empty() {
        out.push(attention(model, tiling, "attn_decode", decode, 1.0));
    }
    out.push(gemm(tiling, "o_proj", KernelGroup::OProj, m, h, h, d, 1.0));
    let f = model.activated_fraction;
    let mut up = gemm(
        tiling,
        "mlp_up_gate",
        KernelGroup::Mlp,
        m,
        2 * model.intermediate,
        h,
        d,
        f,
    );
    up.mem_bytes += norm_bytes;
    out.push(up);
    out.push(gemm(
        tiling,
        "mlp_down",
        KernelGroup::Mlp,
        m,
        h,
        model.intermediate,
        d,
        f,
    ));
    Ok(out)
}

/// `M x K` activations times `K x N` weights, `weight_frac` of which is active.
#[allow(clippy::too_many_arguments)]
fn gemm(
    tiling: &Tiling,
    name: &str,
    group: KernelGroup,
    m: u64,
    n: u64,
    k: u64,
    dtype: f64,
    weight_frac: f64,
) -> KernelDesc {
    let flops = 2.0 * m as f64 * n as f64 * k as f64 * weight_frac;
    let weights = (k * n) as f64 * dtype * weight_frac;
    let acts = ((m * k) + (m * n)) as f64 * dtype;
    KernelDesc {
        name: name.to_string(),
        group,
        flops,
        mem_bytes: weights + acts,
        grid_blocks: m.div_ceil(tiling.gemm_tile_m) * n.div_ceil(tiling.gemm_tile_n),
        blocks_per_sm: tiling.gemm_blocks_per_sm,
    }
}

/// Attention over `seqs`: QK^T and PV cost `4 * new * ctx * hidden` FLOPs,
/// with `self_factor` applied to the new-vs-new (causal) block.
fn attention(model: &ModelSpec, tiling: &Tiling, name: &str, seqs: &[SeqSpan], self_factor: f64) -> KernelDesc {
    let h = model.hidden as f64;
    let d = model.dtype_bytes as f64;
    let kv = 2.0 * model.kv_dim() as f64 * d;
    let mut flops = 0.0;
    let mut bytes = 0.0;
    let mut grid = 0;
    for s in seqs {
        let (cached, new) = (s.cached as f64, s.new as f64);
        flops += 4.0 * h * new * (cached + self_factor * new);
        // Q read and output write
        bytes += 2.0 * new * h * d;
        // KV read of the whole context plus the KV write of the new tokens
        bytes += (cached + new) * kv + new * kv;
        grid += model.num_heads * s.new.div_ceil(tiling.attn_q_tile);
    }
    KernelDesc {
        name: name.to_string(),
        group: KernelGroup::Attention,
        flops,
        mem_bytes: bytes,
        grid_blocks: grid,
        blocks_per_sm: tiling.attn_blocks_per_sm,
    }
}

/// Wave accounting of one kernel of a prefill layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelWave {
    pub name: String,
    pub group: KernelGroup,
    pub flops: f64,
    pub grid_blocks: u64,
    pub stats: WaveStats,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WaveProfile {
    pub seq_len: u64,
    pub kernels: Vec<KernelWave>,
    /// FLOP-weighted idle ratio over the layer.
    pub layer_idle: f64,
}

/// Per-kernel SM idle ratios of one prefill layer over `seq_len` tokens on
/// all of `gpu`'s SMs.
pub fn wave_profile(model: &ModelSpec, tiling: &Tiling, gpu: &GpuSpec, seq_len: u64) -> Result<WaveProfile> {
    let ks = layer_kernels_with(model, tiling, Phase::Prefill, &[SeqSpan::prefill(seq_len)])?;
    let mut kernels = Vec::with_capacity(ks.len());
    for k in ks {
        let stats = wave_stats(k.grid_blocks, k.blocks_per_sm as u64, gpu.num_sms as u64)?;
        kernels.push(KernelWave {
            name: k.name,
            group: k.group,
            flops: k.flops,
            grid_blocks: k.grid_blocks,
            stats,
        });
    }
    let total: f64 = kernels.iter().map(|k| k.flops).sum();
    let layer_idle = kernels.iter().map(|k| k.flops * k.stats.idle_ratio).sum::<f64>() / total;
    Ok(WaveProfile {
        seq_len,
        kernels,
        layer_idle,
    })
}

/// Aggregate arithmetic intensity Σ flops / Σ bytes.
pub fn batch_intensity(kernels: &[KernelDesc]) -> Result<f64> {
    if kernels.is_empty() {
        return invalid("batch_intensity of an empty kernel list");
    }
    let flops: f64 = kernels.iter().map(|k| k.flops).sum();
    let bytes: f64 = kernels.iter().map(|k| k.mem_bytes).sum();
    Ok(flops / bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn find<'a>(ks: &'a [KernelDesc], name: &str) -> &'a KernelDesc {
        ks.iter().find(|k| k.name == name).unwrap()
    }

    #[test]
    fn qkv_grid_at_1024() {
        let m = ModelSpec::llama3_8b();
        let ks = layer_kernels(&m, Phase::Prefill, &[SeqSpan::prefill(1024)]).unwrap();
        assert_eq!(find(&ks, "qkv_proj").grid_blocks, 384);
        assert_eq!(ks.len(), 5);
    }

    #[test]
    fn decode_single_sequence() {
        let m = ModelSpec::llama3_8b();
        let ks = layer_kernels(&m, Phase::Decode, &[SeqSpan::decode(2048)]).unwrap();
        assert_eq!(find(&ks, "qkv_proj").flops, 2.0 * 6144.0 * 4096.0);
        let attn = find(&ks, "attn_decode");
        let kv_read = 2.0 * 2048.0 * 1024.0 * 2.0;
        assert!(attn.mem_bytes >= kv_read);
        assert_eq!(attn.flops, 4.0 * 2048.0 * 4096.0);
    }

    #[test]
    fn decode_rejects_empty_and_multi_token() {
        let m = ModelSpec::llama3_8b();
        assert!(layer_kernels(&m, Phase::Decode, &[]).is_err());
        assert!(layer_kernels(&m, Phase::Decode, &[SeqSpan::prefill(4)]).is_err());
    }

    #[test]
    fn moe_scales_mlp_only() {
        let dense = ModelSpec::llama3_8b();
        let moe = ModelSpec {
            activated_fraction: 0.1,
            ..dense.clone()
        };
        let seqs = [SeqSpan::prefill(512)];
        let a = layer_kernels(&dense, Phase::Prefill, &seqs).unwrap();
        let b = layer_kernels(&moe, Phase::Prefill, &seqs).unwrap();
        let down_a = find(&a, "mlp_down");
        let down_b = find(&b, "mlp_down");
        assert!((down_b.flops - 0.1 * down_a.flops).abs() < 1e-3 * down_b.flops.max(1.0));
        let w_dense = (dense.intermediate * dense.hidden * 2) as f64;
        assert!(((down_a.mem_bytes - down_b.mem_bytes) - 0.9 * w_dense).abs() < 1.0);
        assert_eq!(find(&a, "attn_prefill"), find(&b, "attn_prefill"));
        assert_eq!(find(&a, "qkv_proj"), find(&b, "qkv_proj"));
    }

    #[test]
    fn intensity_examples() {
        let k = KernelDesc {
            name: "k".into(),
            group: KernelGroup::Mlp,
            flops: 1e12,
            mem_bytes: 1e9,
            grid_blocks: 1,
            blocks_per_sm: 1,
        };
        assert_eq!(batch_intensity(std::slice::from_ref(&k)).unwrap(), 1000.0);
        assert_eq!(batch_intensity(&[k.clone(), k]).unwrap(), 1000.0);
        assert!(batch_intensity(&[]).is_err());
    }

    #[test]
    fn prefill_intensity_grows_with_tokens() {
        let m = ModelSpec::llama3_8b();
        let small = layer_kernels(&m, Phase::Prefill, &[SeqSpan::prefill(128)]).unwrap();
        let big = layer_kernels(&m, Phase::Prefill, &[SeqSpan::prefill(2048)]).unwrap();
        assert!(batch_intensity(&big).unwrap() > batch_intensity(&small).unwrap());
    }

    #[test]
    fn chunked_gemm_work_is_invariant_and_attention_bytes_grow() {
        let m = ModelSpec::llama3_8b();
        let sl = 4096;
        let whole = layer_kernels(&m, Phase::Prefill, &[SeqSpan::prefill(sl)]).unwrap();
        let mut gemm_flops = 0.0;
        let mut attn_bytes = 0.0;
        let mut attn_flops = 0.0;
        for i in 0..4 {
            let ks = layer_kernels(&m, Phase::Prefill, &[SeqSpan::chunk(i * 1024, 1024)]).unwrap();
            for k in &ks {
                if k.group == KernelGroup::Attention {
                    attn_bytes += k.mem_bytes;
                    attn_flops += k.flops;
                } else {
                    gemm_flops += k.flops;
                }
            }
        }
        let whole_gemm: f64 = whole
            .iter()
            .filter(|k| k.group != KernelGroup::Attention)
            .map(|k| k.flops)
            .sum();
        let whole_attn = find(&whole, "attn_prefill");
        assert!((gemm_flops - whole_gemm).abs() <= 1e-9 * whole_gemm);
        assert!((attn_flops - whole_attn.flops).abs() <= 1e-9 * attn_flops);
        assert!(attn_bytes > whole_attn.mem_bytes);
    }
}
