//! SLO-aware prefill/decode scheduling and SM partitioning.
//!
//! The prefill scheduler runs once per `l_step` layers: it refreshes TTFT
//! projections, reorders the queue, picks the next batch, and nudges the SM
//! split between the two phases. The decode scheduler runs once per step and
//! only merges finished prefills into the running batch.

mod decode;
mod prefill;

pub use decode::schedule_decode;
pub use prefill::{
    balanced_candidates, effective_partition, form_batch, min_decode_sms, project_queue, reorder_queue,
    schedule_prefill, set_balanced_sm, suspension_projection, transition_handoff, EffectivePartition, Sharing,
};

use crate::engine::{KvPool, RequestRecord};
use crate::error::{invalid, Result};
use crate::perf_model::ExecutionState;
use crate::stats::quantile;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SloSpec {
    /// Bound on TTFT divided by input length.
    pub norm_ttft_s_per_token: f64,
    pub tpot_s: f64,
}

impl SloSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.norm_ttft_s_per_token > 0.0 && self.tpot_s > 0.0) {
            return invalid("SLO bounds must be > 0");
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> SloSpec {
        SloSpec {
            norm_ttft_s_per_token: self.norm_ttft_s_per_token * c,
            tpot_s: self.tpot_s * c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    /// Layers launched per prefill scheduling cycle.
    pub l_step: u32,
    /// SMs moved per partition adjustment.
    pub sm_step: u32,
    /// Recent decode latencies the TPOT P90 is taken over.
    pub p90_window: usize,
    /// Layers before the end of the last prefill batch at which decode
    /// starts taking over the prefill SMs.
    pub transition_layers: u32,
    /// ReduceDecodeSM only fires when the projected step latency on the
    /// smaller decode partition stays within `tpot_headroom * tpot_s`.
    pub tpot_headroom: f64,
    /// Batch-formation intensity target in FLOP/byte; `None` uses the
    /// ridge point c_p/d_p of the current prefill partition.
    pub intensity_target: Option<f64>,
    /// Host-side cost of one scheduling cycle (metadata exchange).
    pub metadata_s: f64,
    /// Host-side cost of the latency predictions in one cycle.
    pub predict_s: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            l_step: 4,
            sm_step: 2,
            p90_window: 64,
            transition_layers: 0,
            tpot_headroom: 0.9,
            intensity_target: None,
            metadata_s: 0.21e-3,
            predict_s: 10.2e-6,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self, num_layers: u32) -> Result<()> {
        if self.l_step == 0 || self.sm_step == 0 {
            return invalid("sched.l_step and sched.sm_step must be >= 1");
        }
        if self.p90_window < 10 {
            return invalid("sched.p90_window must be >= 10");
        }
        if self.transition_layers > num_layers {
            return invalid("sched.transition_layers exceeds the model depth");
        }
        if !(self.tpot_headroom > 0.0 && self.tpot_headroom <= 1.0) {
            return invalid("sched.tpot_headroom must lie in (0, 1]");
        }
        if self.intensity_target.is_some_and(|v| !(v > 0.0)) {
            return invalid("sched.intensity_target must be > 0");
        }
        if !(self.metadata_s >= 0.0 && self.predict_s >= 0.0) {
            return invalid("sched overheads must be >= 0");
        }
        Ok(())
    }

    pub fn cycle_overhead_s(&self) -> f64 {
        self.metadata_s + self.predict_s
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrefillState {
    pub queue: VecDeque<u64>,
    pub in_flight: Vec<u64>,
    pub layers_done: u32,
}

/// Everything the schedulers can see; owned by the engine.
#[derive(Debug, Clone)]
pub struct SystemState {
    /// Running work and the current partition (`prefill_sms`/`decode_sms`
    /// hold the partition even while a phase is idle).
    pub es: ExecutionState,
    pub ps: PrefillState,
    pub rs: BTreeMap<u64, RequestRecord>,
    pub sim_time: f64,
    pub ttft_estimates: BTreeMap<u64, f64>,
    pub tpot_window: VecDeque<f64>,
    pub decode_running: Vec<u64>,
    /// Prefilled requests waiting for the next decode step boundary.
    pub decode_ready: Vec<u64>,
    pub decode_suspended: bool,
    pub kv: KvPool,
}

impl SystemState {
    pub fn new(num_sms: u32, kv_pool_bytes: u64) -> Self {
        SystemState {
            es: ExecutionState {
                prefill_sms: num_sms,
                decode_sms: 0,
                ..Default::default()
            },
            ps: PrefillState::default(),
            rs: BTreeMap::new(),
            sim_time: 0.0,
            ttft_estimates: BTreeMap::new(),
            tpot_window: VecDeque::new(),
            decode_running: Vec::new(),
            decode_ready: Vec::new(),
            decode_suspended: false,
            kv: KvPool::new(kv_pool_bytes),
        }
    }

    pub fn record(&self, id: u64) -> &RequestRecord {
        &self.rs[&id]
    }

    /// Rebuild the ES sequence lengths from the in-flight and running sets.
    pub fn refresh_es(&mut self) {
        self.es.prefill_lens = self
            .ps
            .in_flight
            .iter()
            .map(|id| self.rs[id].request.input_len)
            .collect();
        self.es.prefill_prefix.clear();
        self.es.decode_ctx_lens = self.decode_running.iter().map(|id| self.rs[id].context_len()).collect();
    }

    pub fn push_tpot(&mut self, sample: f64, window: usize) {
        self.tpot_window.push_back(sample);
        while self.tpot_window.len() > window {
            self.tpot_window.pop_front();
        }
    }

    /// P90 of the TPOT window (0 when empty).
    pub fn tpot_p90(&self) -> f64 {
        let v: Vec<f64> = self.tpot_window.iter().copied().collect();
        quantile(&v, 0.9).unwrap_or(0.0)
    }

    pub fn decode_active(&self) -> bool {
        !self.decode_running.is_empty() && !self.decode_suspended
    }

    pub fn has_prefill_work(&self) -> bool {
        !self.ps.queue.is_empty() || !self.ps.in_flight.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Balanced,
    ReduceDecode,
    ReducePrefill,
    Suspend,
    Noop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSource {
    /// Continue the in-flight batch.
    InFlight,
    /// Start a new batch popped from the queue.
    Queue,
    /// Nothing to run (or a decode step).
    Idle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDecision {
    pub next_tasks: Vec<u64>,
    pub layers_to_run: u32,
    pub new_prefill_sms: u32,
    pub new_decode_sms: u32,
    pub decode_suspended: bool,
    pub branch: Branch,
    pub source: TaskSource,
    /// Whether the prefill side met its TTFT bound at decision time.
    pub satisfy: bool,
    /// TPOT P90 read from the window.
    pub tpot_p90: f64,
    /// Normalized TTFT figure the satisfy test used (max over P or P90 over Q).
    pub ttft_metric: f64,
    /// Projected per-request TPOT P90 if decode were suspended.
    pub suspend_projection: Option<f64>,
    /// Decode holds extra SMs for the end-of-prefill handoff.
    pub transition: bool,
    /// Estimated duration of the work about to launch.
    pub predicted_s: f64,
}

impl ScheduleDecision {
    pub fn noop(state: &SystemState) -> Self {
        ScheduleDecision {
            next_tasks: Vec::new(),
            layers_to_run: state.ps.layers_done,
            new_prefill_sms: state.es.prefill_sms,
            new_decode_sms: state.es.decode_sms,
            decode_suspended: state.decode_suspended,
            branch: Branch::Noop,
            source: TaskSource::Idle,
            satisfy: true,
            tpot_p90: state.tpot_p90(),
            ttft_metric: 0.0,
            suspend_projection: None,
            transition: false,
            predicted_s: 0.0,
        }
    }
}

/// One line of the decision log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub t: f64,
    pub pm: u32,
    pub dm: u32,
    pub branch: Branch,
    pub batch: Vec<u64>,
    pub layers: u32,
    pub pm_prev: u32,
    pub dm_prev: u32,
    pub source: TaskSource,
    pub satisfy: bool,
    pub tpot_p90: f64,
    pub ttft_metric: f64,
    pub suspended: bool,
    pub suspend_projection: Option<f64>,
    pub transition: bool,
    /// Queue order after reordering.
    pub queue: Vec<u64>,
    /// Projected normalized TTFT of each queued request, in queue order.
    pub queue_norm_ttft: Vec<f64>,
}

impl DecisionRecord {
    pub fn new(t: f64, state: &SystemState, d: &ScheduleDecision) -> Self {
        DecisionRecord {
            t,
            pm: d.new_prefill_sms,
            dm: d.new_decode_sms,
            branch: d.branch,
            batch: d.next_tasks.clone(),
            layers: d.layers_to_run,
            pm_prev: state.es.prefill_sms,
            dm_prev: state.es.decode_sms,
            source: d.source,
            satisfy: d.satisfy,
            tpot_p90: d.tpot_p90,
            ttft_metric: d.ttft_metric,
            suspended: d.decode_suspended,
            suspend_projection: d.suspend_projection,
            transition: d.transition,
            queue: state.ps.queue.iter().copied().collect(),
            queue_norm_ttft: state
                .ps
                .queue
                .iter()
                .map(|id| {
                    let est = state.ttft_estimates.get(id).copied().unwrap_or(f64::NAN);
                    est / state.record(*id).request.input_len as f64
                })
                .collect(),
        }
    }
}
