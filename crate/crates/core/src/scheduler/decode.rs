use super::{Branch, ScheduleDecision, SchedulerConfig, SloSpec, SystemState, TaskSource};
use crate::engine::RequestState;
use crate::error::Result;
use crate::perf_model::{ExecutionState, LatencyModel};

/// One decode step boundary: drop finished requests, merge freshly
/// prefilled ones (FCFS, appended at the tail), and predict the step on the
/// decode partition. The engine feeds measured gaps back with
/// [`SystemState::push_tpot`].
pub fn schedule_decode<M: LatencyModel + ?Sized>(
    state: &mut SystemState,
    _slo: &SloSpec,
    model: &M,
    _cfg: &SchedulerConfig,
) -> Result<ScheduleDecision> {
    let now = state.sim_time;
    let rs = &state.rs;
    state.decode_running.retain(|id| !rs[id].is_finished());
    for id in std::mem::take(&mut state.decode_ready) {
        let rec = state.rs.get_mut(&id).expect("ready request has a record");
        if rec.is_finished() {
            continue;
        }
        rec.state = RequestState::Decoding;
        rec.decode_start_s.get_or_insert(now);
        state.decode_running.push(id);
    }
    state.refresh_es();
    let mut d = ScheduleDecision::noop(state);
    if state.decode_running.is_empty() || state.decode_suspended {
        return Ok(d);
    }
    let n = model.gpu().num_sms;
    let prefill_on = !state.ps.in_flight.is_empty();
    let dm = if prefill_on { state.es.decode_sms.clamp(1, n) } else { n };
    let es = ExecutionState {
        decode_sms: dm,
        prefill_sms: if prefill_on { n - dm } else { 0 },
        ..state.es.clone()
    };
    d.next_tasks = state.decode_running.clone();
    d.layers_to_run = model.num_layers();
    d.source = TaskSource::InFlight;
    d.branch = Branch::Noop;
    d.predicted_s = model.estimate(&es)?.decode_step_s;
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::oracle_for_tests as oracle;
    use crate::engine::RequestRecord;
    use crate::workload::Request;

    fn state_with_running(k: u64) -> SystemState {
        let mut s = SystemState::new(108, 1 << 40);
        for id in 0..k {
            let mut r = RequestRecord::new(Request {
                id,
                arrival_s: 0.0,
                input_len: 500,
                output_len: 50,
            });
            r.emit(0.1).unwrap();
            s.rs.insert(id, r);
            s.decode_running.push(id);
        }
        s
    }

    #[test]
    fn no_decode_work_is_noop() {
        let mut s = SystemState::new(108, 1 << 40);
        let slo = SloSpec {
            norm_ttft_s_per_token: 1e-3,
            tpot_s: 0.1,
        };
        let d = schedule_decode(&mut s, &slo, &oracle(), &SchedulerConfig::default()).unwrap();
        assert!(d.next_tasks.is_empty());
        assert_eq!(d.predicted_s, 0.0);
    }

    #[test]
    fn fresh_prefill_joins_the_batch() {
        let mut s = state_with_running(8);
        let mut r = RequestRecord::new(Request {
            id: 99,
            arrival_s: 0.0,
            input_len: 300,
            output_len: 5,
        });
        r.emit(0.2).unwrap();
        s.rs.insert(99, r);
        s.decode_ready.push(99);
        s.sim_time = 0.25;
        let slo = SloSpec {
            norm_ttft_s_per_token: 1e-3,
            tpot_s: 0.1,
        };
        let d = schedule_decode(&mut s, &slo, &oracle(), &SchedulerConfig::default()).unwrap();
        assert_eq!(d.next_tasks.len(), 9);
        assert_eq!(*d.next_tasks.last().unwrap(), 99);
        assert_eq!(s.rs[&99].decode_start_s, Some(0.25));
        assert!(d.predicted_s > 0.0);
    }

    #[test]
    fn p90_over_window() {
        let mut s = SystemState::new(108, 1 << 40);
        for ms in 1..=13 {
            s.push_tpot(ms as f64 * 1e-3, 10);
        }
        assert_eq!(s.tpot_window.len(), 10);
        assert!((s.tpot_p90() - 12.1e-3).abs() < 1e-12);
    }
}
