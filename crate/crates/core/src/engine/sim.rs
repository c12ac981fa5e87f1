use super::calibration::{profile, CalibrationPlan, CalibrationSamples};
use super::metrics::{compute_metrics, MetricsReport};
use super::oracle::{GroundTruthOracle, OracleConfig};
use super::records::{KvPool, RequestRecord, RequestState};
use crate::error::{invalid, Result};
use crate::perf_model::{Estimator, ExecutionState, GpuSpec, LatencyModel, Phase, PhaseLatency};
use crate::scheduler::{
    effective_partition, form_batch, min_decode_sms, schedule_decode, schedule_prefill, DecisionRecord,
    SchedulerConfig, Sharing, SloSpec, SystemState, TaskSource,
};
use crate::workload::{kv_bytes, ModelSpec, Request, SeqSpan};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Policy {
    /// Concurrent prefill/decode with SLO-driven SM repartitioning.
    Bullet,
    /// Lockstep hybrid batches with a per-iteration token budget.
    Chunked { chunk_size: u64 },
    /// Prefill masked to a fixed SM count, decode free to use all SMs.
    Static { prefill_sms: u32 },
    /// Both phases on every SM.
    Nopartition,
}

impl Policy {
    pub fn label(&self) -> String {
        match self {
            Policy::Bullet => "bullet".into(),
            Policy::Chunked { chunk_size } => format!("chunked-{chunk_size}"),
            Policy::Static { prefill_sms } => format!("static-{prefill_sms}"),
            Policy::Nopartition => "nopartition".into(),
        }
    }
}

impl std::str::FromStr for Policy {
    type Err = crate::Error;

    /// Parses the forms produced by [`Policy::label`].
    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            crate::Error::InvalidArgument(format!(
                "unknown policy `{s}` (bullet, nopartition, chunked-<cs>, static-<pm>)"
            ))
        };
        match s {
            "bullet" => return Ok(Policy::Bullet),
            "nopartition" => return Ok(Policy::Nopartition),
            _ => {}
        }
        let (kind, n) = s.split_once('-').ok_or_else(bad)?;
        match kind {
            "chunked" => Ok(Policy::Chunked {
                chunk_size: n.parse().map_err(|_| bad())?,
            }),
            "static" => Ok(Policy::Static {
                prefill_sms: n.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

fn default_policy() -> Policy {
    Policy::Bullet
}

fn default_noise() -> f64 {
    0.035
}

fn default_decode_share() -> f64 {
    0.1
}

fn default_reconfig() -> f64 {
    4.1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub gpu: GpuSpec,
    pub model: ModelSpec,
    pub slo: SloSpec,
    #[serde(default)]
    pub sched: SchedulerConfig,
    #[serde(default = "default_policy")]
    pub policy: Policy,
    /// Device memory for weights plus KV cache.
    pub kv_pool_bytes: u64,
    #[serde(default)]
    pub seed: u64,
    /// Lognormal sigma of the oracle's measurement noise.
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    #[serde(default = "default_reconfig")]
    pub reconfig_s: f64,
    /// Extra slowdown of both phases while their SM sets overlap.
    #[serde(default)]
    pub overlap_penalty: f64,
    /// Fraction of SMs claimed by both phases that decode effectively gets.
    #[serde(default = "default_decode_share")]
    pub overlap_decode_share: f64,
    #[serde(default)]
    pub calibration_samples: CalibrationSamples,
    #[serde(default)]
    pub oracle: OracleConfig,
    /// Stop processing events after this simulated time.
    #[serde(default)]
    pub horizon_s: Option<f64>,
}

impl SimConfig {
    pub fn new(gpu: GpuSpec, model: ModelSpec, slo: SloSpec, policy: Policy, kv_pool_bytes: u64) -> Self {
        SimConfig {
            gpu,
            model,
            slo,
            sched: SchedulerConfig::default(),
            policy,
            kv_pool_bytes,
            seed: 0,
            noise_sigma: default_noise(),
            reconfig_s: default_reconfig(),
            overlap_penalty: 0.0,
            overlap_decode_share: default_decode_share(),
            calibration_samples: CalibrationSamples::default(),
            oracle: OracleConfig::default(),
            horizon_s: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gpu.validate()?;
        self.model.validate()?;
        self.slo.validate()?;
        self.sched.validate(self.model.num_layers)?;
        self.oracle.validate()?;
        if self.kv_pool_bytes <= self.model.weight_bytes() {
            return invalid("kv_pool_bytes must exceed the model weight footprint");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return invalid("noise_sigma must be a finite value >= 0");
        }
        if !(self.reconfig_s >= 0.0 && self.overlap_penalty >= 0.0) {
            return invalid("reconfig_s and overlap_penalty must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.overlap_decode_share) {
            return invalid("overlap_decode_share must lie in [0, 1]");
        }
        if self.horizon_s.is_some_and(|h| !(h > 0.0)) {
            return invalid("horizon_s must be > 0");
        }
        match self.policy {
            Policy::Chunked { chunk_size: 0 } => invalid("chunk_size must be >= 1"),
            Policy::Static { prefill_sms } if prefill_sms > self.gpu.num_sms => {
                invalid(format!("static prefill_sms must lie in 0..={}", self.gpu.num_sms))
            }
            _ => Ok(()),
        }
    }

    /// Bytes left for the KV cache once the weights are resident.
    pub fn kv_capacity(&self) -> u64 {
        self.kv_pool_bytes.saturating_sub(self.model.weight_bytes())
    }

    pub fn oracle(&self) -> GroundTruthOracle {
        GroundTruthOracle::new(
            self.gpu.clone(),
            self.model.clone(),
            self.oracle.clone(),
            self.noise_sigma,
        )
    }
}

/// The scheduler's latency model: the noise-free oracle in the dense limit,
/// otherwise an estimator fitted to sparse noisy samples and refined online.
#[derive(Debug, Clone)]
pub enum Predictor {
    Exact(GroundTruthOracle),
    Calibrated(Estimator),
}

impl Predictor {
    pub fn build(cfg: &SimConfig) -> Result<Self> {
        let plan = match &cfg.calibration_samples {
            CalibrationSamples::All => {
                let mut exact = cfg.oracle();
                exact.noise_sigma = 0.0;
                return Ok(Predictor::Exact(exact));
            }
            CalibrationSamples::Default => CalibrationPlan::default_for(&cfg.gpu),
            CalibrationSamples::Sparse(plan) => plan.clone(),
        };
        // profiling draws from its own stream so the run's noise is unaffected
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
        let store = profile(&cfg.oracle(), &plan, &mut rng)?;
        Ok(Predictor::Calibrated(Estimator::new(
            cfg.gpu.clone(),
            cfg.model.clone(),
            store,
        )))
    }

    /// Feed a measurement back (no-op for the exact oracle).
    pub fn observe(&mut self, phase: Phase, es: &ExecutionState, measured_s: f64) -> Result<()> {
        match self {
            Predictor::Exact(_) => Ok(()),
            Predictor::Calibrated(e) => e.update_online(phase, es, measured_s),
        }
    }
}

impl LatencyModel for Predictor {
    fn gpu(&self) -> &GpuSpec {
        match self {
            Predictor::Exact(o) => &o.gpu,
            Predictor::Calibrated(e) => &e.gpu,
        }
    }

    fn model(&self) -> &ModelSpec {
        match self {
            Predictor::Exact(o) => &o.model,
            Predictor::Calibrated(e) => &e.model,
        }
    }

    fn estimate(&self, es: &ExecutionState) -> Result<PhaseLatency> {
        match self {
            Predictor::Exact(o) => o.exact(es),
            Predictor::Calibrated(e) => e.estimate_latency(es),
        }
    }
}

/// Effective SM usage and load after an event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimelineRow {
    pub t: f64,
    pub pm: u32,
    pub dm: u32,
    pub queue_len: usize,
    pub decode_batch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkRef {
    pub id: u64,
    pub cached: u64,
    pub new: u64,
}

/// One lockstep iteration of the chunked baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub start_s: f64,
    pub latency_s: f64,
    pub prefill_tokens: u64,
    pub decode_tokens: u64,
    pub chunks: Vec<ChunkRef>,
}

/// Invariant bookkeeping gathered while the event loop runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    pub events: u64,
    /// Events processed with a timestamp earlier than their predecessor.
    pub out_of_order: u64,
    /// Events after which pool usage differed from the resident requests' KV.
    pub kv_mismatches: u64,
    pub kv_peak_bytes: u64,
    /// Bullet only: events where prefill work was pending next to running,
    /// unsuspended decode and the partition did not sum to N.
    pub partition_gaps: u64,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub metrics: MetricsReport,
    pub records: Vec<RequestRecord>,
    pub decisions: Vec<DecisionRecord>,
    pub timeline: Vec<TimelineRow>,
    pub iterations: Vec<IterationRecord>,
    pub audit: Audit,
}

fn resident_kv<'r>(model: &ModelSpec, recs: impl Iterator<Item = &'r RequestRecord>) -> u64 {
    recs.filter(|r| matches!(r.state, RequestState::Prefilling | RequestState::Decoding))
        .map(|r| kv_bytes(model, r.request.input_len + r.request.output_len))
        .sum()
}

impl Audit {
    fn observe(&mut self, t: f64, last_t: &mut f64, kv: &KvPool, resident: u64) {
        self.events += 1;
        if t < *last_t {
            self.out_of_order += 1;
        }
        *last_t = t;
        if kv.used != resident || kv.used > kv.capacity {
            self.kv_mismatches += 1;
        }
        self.kv_peak_bytes = self.kv_peak_bytes.max(kv.used);
    }
}

pub fn validate_trace(trace: &[Request]) -> Result<()> {
    let mut ids = BTreeSet::new();
    for (i, r) in trace.iter().enumerate() {
        r.validate()?;
        if !ids.insert(r.id) {
            return invalid(format!("duplicate request id {}", r.id));
        }
        if i > 0 && r.arrival_s < trace[i - 1].arrival_s {
            return invalid(format!("trace not sorted by arrival at request {}", r.id));
        }
    }
    Ok(())
}

/// Simulate `trace` under `cfg.policy`. Deterministic in `(cfg, trace)`.
pub fn run(cfg: &SimConfig, trace: &[Request]) -> Result<SimOutput> {
    cfg.validate()?;
    validate_trace(trace)?;
    let mut out = match cfg.policy {
        Policy::Chunked { chunk_size } => run_chunked_inner(cfg, trace, chunk_size)?,
        _ => Spatial::new(cfg, trace)?.run()?,
    };
    out.metrics.policy = cfg.policy.label();
    Ok(out)
}

/// [`run`] restricted to the chunked baseline.
pub fn run_chunked(cfg: &SimConfig, trace: &[Request]) -> Result<SimOutput> {
    match cfg.policy {
        Policy::Chunked { .. } => run(cfg, trace),
        _ => invalid("run_chunked needs policy = chunked"),
    }
}

/// [`run`] restricted to a frozen prefill partition.
pub fn run_static(cfg: &SimConfig, trace: &[Request]) -> Result<SimOutput> {
    match cfg.policy {
        Policy::Static { .. } | Policy::Nopartition => run(cfg, trace),
        _ => invalid("run_static needs policy = static"),
    }
}

fn finish(cfg: &SimConfig, trace: &[Request], records: Vec<RequestRecord>, timeline: &[TimelineRow]) -> MetricsReport {
    let mut m = compute_metrics(&records, &cfg.slo);
    let n = cfg.gpu.num_sms as f64;
    let start = trace.first().map_or(0.0, |r| r.arrival_s);
    let (mut pm, mut dm, mut q, mut span) = (0.0, 0.0, 0.0, 0.0);
    for w in timeline.windows(2) {
        let dt = w[1].t - w[0].t;
        if w[0].t < start || dt <= 0.0 {
            continue;
        }
        pm += dt * w[0].pm as f64;
        dm += dt * w[0].dm as f64;
        q += dt * w[0].queue_len as f64;
        span += dt;
    }
    if span > 0.0 {
        m.aggregates.prefill_sm_occupancy = pm / (n * span);
        m.aggregates.decode_sm_occupancy = dm / (n * span);
        m.aggregates.mean_queue_len = q / span;
    }
    let mut last = None;
    for row in timeline {
        if last != Some(row.queue_len) {
            m.queue_timeline.push((row.t, row.queue_len));
            last = Some(row.queue_len);
        }
    }
    m
}

#[derive(Debug, Clone, Copy)]
enum Ev {
    Arrival(usize),
    PrefillDone,
    DecodeDone,
    ReconfigApplied { pm: u32, dm: u32 },
}

#[derive(Debug, Clone, Copy)]
struct Event {
    t: f64,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // reversed: BinaryHeap pops the earliest (time, sequence) first
    fn cmp(&self, other: &Self) -> Ordering {
        other.t.total_cmp(&self.t).then_with(|| other.seq.cmp(&self.seq))
    }
}

struct PrefillRun {
    target: u32,
    layers: u32,
    sms: u32,
    lens: Vec<u64>,
    kernel_s: f64,
}

struct DecodeRun {
    batch: Vec<u64>,
    es: ExecutionState,
    latency: f64,
}

/// Event loop shared by the bullet, static and no-partition policies.
struct Spatial<'a> {
    cfg: &'a SimConfig,
    trace: &'a [Request],
    oracle: GroundTruthOracle,
    predictor: Predictor,
    rng: ChaCha8Rng,
    st: SystemState,
    heap: BinaryHeap<Event>,
    seq: u64,
    n: u32,
    layers: u32,
    bullet: bool,
    static_pm: u32,
    active: (u32, u32),
    prefill: Option<PrefillRun>,
    prefill_idle: bool,
    decode: Option<DecodeRun>,
    /// Time of the last token emitted by the running decode batch.
    decode_anchor: Option<f64>,
    run_pm: u32,
    run_dm: u32,
    decisions: Vec<DecisionRecord>,
    timeline: Vec<TimelineRow>,
    /// The last prefill decision handed decode extra SMs for the handoff.
    transition: bool,
    audit: Audit,
    last_t: f64,
}

impl<'a> Spatial<'a> {
    fn new(cfg: &'a SimConfig, trace: &'a [Request]) -> Result<Self> {
        let n = cfg.gpu.num_sms;
        let (bullet, static_pm) = match cfg.policy {
            Policy::Bullet => (true, n),
            Policy::Static { prefill_sms } => (false, prefill_sms),
            Policy::Nopartition => (false, n),
            Policy::Chunked { .. } => unreachable!("chunked runs its own loop"),
        };
        let mut st = SystemState::new(n, cfg.kv_capacity());
        if !bullet {
            st.es.prefill_sms = static_pm;
            st.es.decode_sms = n;
        }
        let active = (st.es.prefill_sms, st.es.decode_sms);
        Ok(Spatial {
            cfg,
            trace,
            oracle: cfg.oracle(),
            predictor: Predictor::build(cfg)?,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            st,
            heap: BinaryHeap::new(),
            seq: 0,
            n,
            layers: cfg.model.num_layers,
            bullet,
            static_pm,
            active,
            prefill: None,
            prefill_idle: true,
            decode: None,
            decode_anchor: None,
            run_pm: 0,
            run_dm: 0,
            decisions: Vec::new(),
            timeline: Vec::new(),
            transition: false,
            audit: Audit::default(),
            last_t: f64::NEG_INFINITY,
        })
    }

    fn check(&mut self, t: f64) {
        let resident = resident_kv(&self.cfg.model, self.st.rs.values());
        self.audit.observe(t, &mut self.last_t, &self.st.kv, resident);
        if self.bullet
            && self.st.has_prefill_work()
            && self.st.decode_active()
            && !self.transition
            && self.st.es.prefill_sms + self.st.es.decode_sms != self.n
        {
            self.audit.partition_gaps += 1;
        }
    }

    fn sharing(&self) -> Sharing {
        Sharing {
            decode_share: self.cfg.overlap_decode_share,
            penalty: self.cfg.overlap_penalty,
        }
    }

    fn push(&mut self, t: f64, ev: Ev) {
        self.seq += 1;
        self.heap.push(Event { t, seq: self.seq, ev });
    }

    fn run(mut self) -> Result<SimOutput> {
        for (i, r) in self.trace.iter().enumerate() {
            self.push(r.arrival_s, Ev::Arrival(i));
        }
        let mut now = 0.0;
        while let Some(e) = self.heap.pop() {
            if self.cfg.horizon_s.is_some_and(|h| e.t > h) {
                break;
            }
            debug_assert!(e.t >= now, "event out of order");
            now = e.t;
            self.st.sim_time = now;
            match e.ev {
                Ev::Arrival(i) => self.on_arrival(i, now)?,
                Ev::PrefillDone => self.on_prefill_done(now)?,
                Ev::DecodeDone => self.on_decode_done(now)?,
                Ev::ReconfigApplied { pm, dm } => self.active = (pm, dm),
            }
            self.sample(now);
            self.check(now);
        }
        let records: Vec<RequestRecord> = self.trace.iter().map(|r| self.st.rs[&r.id].clone()).collect();
        let metrics = finish(self.cfg, self.trace, records.clone(), &self.timeline);
        Ok(SimOutput {
            metrics,
            records,
            decisions: self.decisions,
            timeline: self.timeline,
            iterations: Vec::new(),
            audit: self.audit,
        })
    }

    fn sample(&mut self, t: f64) {
        let row = TimelineRow {
            t,
            pm: self.run_pm,
            dm: self.run_dm,
            queue_len: self.st.ps.queue.len(),
            decode_batch: self.st.decode_running.len(),
        };
        let same = self.timeline.last().is_some_and(|l| {
            (l.pm, l.dm, l.queue_len, l.decode_batch) == (row.pm, row.dm, row.queue_len, row.decode_batch)
        });
        if !same {
            self.timeline.push(row);
        }
    }

    fn on_arrival(&mut self, i: usize, t: f64) -> Result<()> {
        let r = self.trace[i].clone();
        let id = r.id;
        self.st.rs.insert(id, RequestRecord::new(r));
        self.st.ps.queue.push_back(id);
        self.start_prefill(t)
    }

    fn kv_need(&self, id: u64) -> u64 {
        let r = &self.st.rs[&id].request;
        kv_bytes(&self.cfg.model, r.input_len + r.output_len)
    }

    /// Change the partition; returns the reconfiguration delay incurred.
    fn set_partition(&mut self, pm: u32, dm: u32, t: f64) -> f64 {
        if (pm, dm) == (self.st.es.prefill_sms, self.st.es.decode_sms) {
            return 0.0;
        }
        self.st.es.prefill_sms = pm;
        self.st.es.decode_sms = dm;
        self.push(t + self.cfg.reconfig_s, Ev::ReconfigApplied { pm, dm });
        self.cfg.reconfig_s
    }

    /// Give decode the fewest SMs that hold the TPOT bound (with headroom)
    /// next to pending prefill work, prefill the rest.
    fn activate_partition(&mut self, t: f64) -> Result<f64> {
        let slo = SloSpec {
            tpot_s: self.cfg.slo.tpot_s * self.cfg.sched.tpot_headroom,
            ..self.cfg.slo
        };
        let dm = min_decode_sms(&self.st, &slo, &self.predictor, &self.cfg.sched)?
            .min(self.n - 1)
            .max(1);
        Ok(self.set_partition(self.n - dm, dm, t))
    }

    /// Merge prefilled requests into decode; sets the activation partition
    /// when decode starts next to pending prefill work.
    fn merge_decode(&mut self, t: f64) -> Result<f64> {
        let was_empty = self.st.decode_running.is_empty();
        self.st.sim_time = t;
        schedule_decode(&mut self.st, &self.cfg.slo, &self.predictor, &self.cfg.sched)?;
        if self.bullet && was_empty && !self.st.decode_running.is_empty() && self.st.has_prefill_work() {
            return self.activate_partition(t);
        }
        Ok(0.0)
    }

    fn start_prefill(&mut self, t: f64) -> Result<()> {
        if self.prefill.is_some() {
            return Ok(());
        }
        if !self.st.has_prefill_work() || (!self.bullet && self.static_pm == 0) {
            self.prefill_idle = true;
            return Ok(());
        }
        let (tasks, target, mut delay, overhead) = if self.bullet {
            let mut delay = 0.0;
            if self.prefill_idle && !self.st.decode_running.is_empty() {
                delay += self.activate_partition(t)?;
            }
            let d = schedule_prefill(&mut self.st, &self.cfg.slo, &self.predictor, &self.cfg.sched)?;
            self.decisions.push(DecisionRecord::new(t, &self.st, &d));
            self.transition = d.transition;
            if d.source == TaskSource::Idle {
                self.prefill_idle = true;
                return Ok(());
            }
            let was_suspended = self.st.decode_suspended;
            self.st.decode_suspended = d.decode_suspended;
            delay += self.set_partition(d.new_prefill_sms, d.new_decode_sms, t);
            if was_suspended && !d.decode_suspended {
                self.decode_anchor = self.decode_anchor.or(Some(t));
            }
            let tasks = if d.source == TaskSource::Queue {
                d.next_tasks
            } else {
                Vec::new()
            };
            (tasks, d.layers_to_run, delay, self.cfg.sched.cycle_overhead_s())
        } else {
            let eff = effective_partition(
                self.n,
                self.static_pm,
                self.n,
                true,
                self.st.decode_active(),
                false,
                self.sharing(),
            );
            let b = form_batch(&self.st, &self.predictor, &self.cfg.sched, eff.prefill_sms)?;
            if b.is_empty() {
                self.prefill_idle = true;
                return Ok(());
            }
            (b, self.layers, 0.0, 0.0)
        };
        self.prefill_idle = false;
        for id in tasks {
            let need = self.kv_need(id);
            let ok = self.st.kv.try_reserve(need);
            debug_assert!(ok, "batch formation checked the KV pool");
            self.st.ps.queue.retain(|q| *q != id);
            self.st.ps.in_flight.push(id);
            self.st.rs.get_mut(&id).expect("queued request").state = RequestState::Prefilling;
            self.st.ps.layers_done = 0;
        }
        self.st.refresh_es();

        let eff = effective_partition(
            self.n,
            self.st.es.prefill_sms,
            self.st.es.decode_sms,
            true,
            self.st.decode_active(),
            self.bullet,
            self.sharing(),
        );
        let layers = target - self.st.ps.layers_done;
        let lens = self.st.es.prefill_lens.clone();
        let layer_s = self
            .oracle
            .prefill_layer(&ExecutionState::prefill_only(lens.clone(), eff.prefill_sms))?;
        let kernel_s = layer_s * layers as f64 * self.oracle.noise(&mut self.rng) * eff.slowdown;
        delay += overhead;
        self.push(t + delay + kernel_s, Ev::PrefillDone);
        self.prefill = Some(PrefillRun {
            target,
            layers,
            sms: eff.prefill_sms,
            lens,
            kernel_s,
        });
        self.run_pm = eff.prefill_sms;
        // decode may have been resumed or re-partitioned by this cycle
        self.start_decode(t)
    }

    fn on_prefill_done(&mut self, t: f64) -> Result<()> {
        let run = self.prefill.take().expect("prefill completion without a running cycle");
        self.run_pm = 0;
        self.st.ps.layers_done = run.target;
        let es = ExecutionState::prefill_only(run.lens, run.sms);
        self.predictor
            .observe(Phase::Prefill, &es, run.kernel_s / run.layers as f64)?;
        if run.target >= self.layers {
            for id in std::mem::take(&mut self.st.ps.in_flight) {
                let need = self.kv_need(id);
                let rec = self.st.rs.get_mut(&id).expect("in-flight request");
                rec.prefill_done_s = Some(t);
                rec.emit(t)?;
                if rec.is_finished() {
                    self.st.kv.release(need);
                } else {
                    self.st.decode_ready.push(id);
                }
            }
            self.st.ps.layers_done = 0;
            self.st.decode_suspended = false;
            self.st.refresh_es();
        }
        let mut delay = 0.0;
        if self.decode.is_none() {
            delay = self.merge_decode(t)?;
        }
        self.start_prefill(t)?;
        self.start_decode_at(t, delay)
    }

    fn start_decode(&mut self, t: f64) -> Result<()> {
        self.start_decode_at(t, 0.0)
    }

    fn start_decode_at(&mut self, t: f64, pending: f64) -> Result<()> {
        if self.decode.is_some() {
            return Ok(());
        }
        let delay = pending + self.merge_decode(t)?;
        if self.st.decode_running.is_empty() {
            self.decode_anchor = None;
            self.run_dm = 0;
            return Ok(());
        }
        if self.st.decode_suspended {
            self.run_dm = 0;
            return Ok(());
        }
        self.st.refresh_es();
        let prefill_on = !self.st.ps.in_flight.is_empty();
        let eff = effective_partition(
            self.n,
            self.st.es.prefill_sms,
            self.st.es.decode_sms,
            prefill_on,
            true,
            self.bullet,
            self.sharing(),
        );
        let es = ExecutionState {
            prefill_lens: if prefill_on {
                self.st.es.prefill_lens.clone()
            } else {
                Vec::new()
            },
            prefill_prefix: Vec::new(),
            prefill_sms: eff.prefill_sms,
            decode_ctx_lens: self.st.es.decode_ctx_lens.clone(),
            decode_sms: eff.decode_sms,
        };
        let latency = self.oracle.decode_step(&es)? * self.oracle.noise(&mut self.rng) * eff.slowdown;
        let start = t + delay;
        self.push(start + latency, Ev::DecodeDone);
        if self.decode_anchor.is_none() {
            self.decode_anchor = Some(start);
        }
        self.decode = Some(DecodeRun {
            batch: self.st.decode_running.clone(),
            es,
            latency,
        });
        self.run_dm = eff.decode_sms;
        Ok(())
    }

    fn on_decode_done(&mut self, t: f64) -> Result<()> {
        let run = self.decode.take().expect("decode completion without a running step");
        self.run_dm = 0;
        self.predictor.observe(Phase::Decode, &run.es, run.latency)?;
        for &id in &run.batch {
            let need = self.kv_need(id);
            let rec = self.st.rs.get_mut(&id).expect("decoding request");
            rec.emit(t)?;
            if rec.is_finished() {
                self.st.kv.release(need);
            }
        }
        if let Some(anchor) = self.decode_anchor {
            self.st.push_tpot(t - anchor, self.cfg.sched.p90_window);
        }
        self.decode_anchor = Some(t);
        self.start_decode(t)?;
        // freed KV may unblock the queue head
        self.start_prefill(t)
    }
}

/// Lockstep chunked-prefill baseline: every iteration runs all decode
/// requests plus up to `chunk_size - decode` prefill tokens taken FCFS from
/// the queue, on all SMs.
fn run_chunked_inner(cfg: &SimConfig, trace: &[Request], chunk_size: u64) -> Result<SimOutput> {
    let oracle = cfg.oracle();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.gpu.num_sms;
    let mut rs: BTreeMap<u64, RequestRecord> = BTreeMap::new();
    let mut queue: VecDeque<u64> = VecDeque::new();
    let mut done_tokens: BTreeMap<u64, u64> = BTreeMap::new();
    let mut running: Vec<u64> = Vec::new();
    let mut ready: Vec<u64> = Vec::new();
    let mut kv = KvPool::new(cfg.kv_capacity());
    let need = |r: &Request| kv_bytes(&cfg.model, r.input_len + r.output_len);
    let mut timeline: Vec<TimelineRow> = Vec::new();
    let mut iterations = Vec::new();
    let mut audit = Audit::default();
    let mut last_t = f64::NEG_INFINITY;
    let mut next = 0;
    let mut t = trace.first().map_or(0.0, |r| r.arrival_s);
    loop {
        while next < trace.len() && trace[next].arrival_s <= t {
            let r = trace[next].clone();
            queue.push_back(r.id);
            rs.insert(r.id, RequestRecord::new(r));
            next += 1;
        }
        for id in ready.drain(..) {
            let rec = rs.get_mut(&id).expect("ready request");
            rec.state = RequestState::Decoding;
            rec.decode_start_s = Some(t);
            running.push(id);
        }
        let mut budget = chunk_size.saturating_sub(running.len() as u64);
        let mut chunks = Vec::new();
        for &id in &queue {
            if budget == 0 {
                break;
            }
            let rec = rs.get_mut(&id).expect("queued request");
            let done = done_tokens.get(&id).copied().unwrap_or(0);
            if done == 0 && rec.state == RequestState::Queued {
                if !kv.try_reserve(need(&rec.request)) {
                    break;
                }
                rec.state = RequestState::Prefilling;
            }
            let take = (rec.request.input_len - done).min(budget);
            budget -= take;
            chunks.push(ChunkRef {
                id,
                cached: done,
                new: take,
            });
        }
        let row = TimelineRow {
            t,
            pm: if chunks.is_empty() { 0 } else { n },
            dm: if running.is_empty() { 0 } else { n },
            queue_len: queue.len(),
            decode_batch: running.len(),
        };
        timeline.push(row);
        if chunks.is_empty() && running.is_empty() {
            if next < trace.len() {
                t = t.max(trace[next].arrival_s);
                continue;
            }
            break;
        }
        if cfg.horizon_s.is_some_and(|h| t > h) {
            break;
        }
        let prefill: Vec<SeqSpan> = chunks.iter().map(|c| SeqSpan::chunk(c.cached, c.new)).collect();
        let decode: Vec<SeqSpan> = running.iter().map(|id| SeqSpan::decode(rs[id].context_len())).collect();
        let latency = oracle.hybrid_iteration(&prefill, &decode)? * oracle.noise(&mut rng);
        let end = t + latency;
        for &id in &running {
            let rec = rs.get_mut(&id).expect("running request");
            rec.emit(end)?;
            if rec.is_finished() {
                kv.release(need(&rec.request));
            }
        }
        running.retain(|id| !rs[id].is_finished());
        for c in &chunks {
            let total = c.cached + c.new;
            done_tokens.insert(c.id, total);
            let rec = rs.get_mut(&c.id).expect("chunked request");
            if total == rec.request.input_len {
                rec.prefill_done_s = Some(end);
                rec.emit(end)?;
                queue.retain(|q| *q != c.id);
                if rec.is_finished() {
                    kv.release(need(&rec.request));
                } else {
                    ready.push(c.id);
                }
            }
        }
        audit.observe(end, &mut last_t, &kv, resident_kv(&cfg.model, rs.values()));
        iterations.push(IterationRecord {
            start_s: t,
            latency_s: latency,
            prefill_tokens: prefill.iter().map(|s| s.new).sum(),
            decode_tokens: decode.len() as u64,
            chunks,
        });
        t = end;
    }
    timeline.dedup_by(|b, a| (a.pm, a.dm, a.queue_len, a.decode_batch) == (b.pm, b.dm, b.queue_len, b.decode_batch));
    let records: Vec<RequestRecord> = trace
        .iter()
        .map(|r| rs.get(&r.id).cloned().unwrap_or_else(|| RequestRecord::new(r.clone())))
        .collect();
    let metrics = finish(cfg, trace, records.clone(), &timeline);
    Ok(SimOutput {
        metrics,
        records,
        decisions: Vec::new(),
        timeline,
        iterations,
        audit,
    })
}
