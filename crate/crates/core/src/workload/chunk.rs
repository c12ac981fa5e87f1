use crate::error::{invalid, Result};
use serde::{Deserialize, Serialize};

/// How a prompt of `sl` tokens splits across hybrid-batch iterations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub n_iters: u64,
    pub chunk_sizes: Vec<u64>,
    /// KV-cache passes counting each chunk's own pass: N(N+1)/2.
    pub reload_events: u64,
    /// Σ over chunks of the tokens that precede the chunk.
    pub reprocessed_tokens: u64,
}

impl ChunkPlan {
    /// Tokens already cached when chunk `i` starts.
    pub fn prefix_before(&self, i: usize) -> u64 {
        self.chunk_sizes[..i].iter().sum()
    }
}

/// Split `sl` prompt tokens into chunks of the residual budget `cs - ds`.
pub fn chunk_plan(sl: u64, cs: u64, ds: u64) -> Result<ChunkPlan> {
    if sl == 0 {
        return invalid("chunk_plan: sequence length must be >= 1");
    }
    if cs <= ds {
        return invalid(format!("chunk_plan: decode tokens ({ds}) fill the whole budget ({cs})"));
    }
    let residual = cs - ds;
    let n = sl.div_ceil(residual);
    let mut chunk_sizes = vec![residual; n as usize];
    let rem = sl - residual * (n - 1);
    *chunk_sizes.last_mut().expect("n >= 1") = rem;
    // chunk i (0-based) is preceded by i full chunks
    let reprocessed_tokens = residual * (n * (n - 1) / 2);
    Ok(ChunkPlan {
        n_iters: n,
        chunk_sizes,
        reload_events: n * (n + 1) / 2,
        reprocessed_tokens,
    })
}
