use smshare_core::engine::SimOutput;
use smshare_core::scheduler::SloSpec;
use std::collections::HashMap;

/// Every logged and audited invariant of one bullet run.
pub fn check(out: &SimOutput, slo: &SloSpec, n: u32) -> Result<(), String> {
    let a = &out.audit;
    if a.out_of_order != 0 || a.kv_mismatches != 0 || a.partition_gaps != 0 {
        return Err(format!("audit: {a:?}"));
    }
    for r in &out.records {
        if r.token_times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(format!("request {}: token times not increasing", r.id()));
        }
    }
    let mut prev_pos: HashMap<u64, usize> = HashMap::new();
    for d in &out.decisions {
        if !d.transition && d.pm + d.dm > n {
            return Err(format!("t={}: pm {} + dm {} > {n}", d.t, d.pm, d.dm));
        }
        let prefill_pending = !d.batch.is_empty() || !d.queue.is_empty();
        if d.tpot_p90 < slo.tpot_s && prefill_pending && d.pm_prev > 0 && d.pm < d.pm_prev && d.dm > d.dm_prev {
            return Err(format!(
                "t={}: SMs moved to decode with TPOT slack ({:?})",
                d.t, d.branch
            ));
        }
        if d.suspended {
            match d.suspend_projection {
                Some(p) if p <= slo.tpot_s => {}
                p => return Err(format!("t={}: suspended with projection {p:?}", d.t)),
            }
        }
        // a queued request only falls back behind work projected to be safe
        let mut pos = HashMap::new();
        for (i, id) in d.queue.iter().enumerate() {
            if let Some(&before) = prev_pos.get(id) {
                if i > before && !(d.queue_norm_ttft[i] <= slo.norm_ttft_s_per_token) {
                    return Err(format!("t={}: request {id} pushed back from {before} to {i}", d.t));
                }
            }
            pos.insert(*id, i);
        }
        prev_pos = pos;
    }
    Ok(())
}
