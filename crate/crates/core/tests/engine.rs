use smshare_core::engine::report::{decisions_jsonl, metrics_json, requests_csv, timeline_csv};
use smshare_core::engine::{run, CalibrationSamples, Policy, Predictor, SimConfig};
use smshare_core::perf_model::{srm_latency, ExecutionState, GpuSpec, KernelGroup, LatencyModel, Phase};
use smshare_core::scheduler::SloSpec;
use smshare_core::workload::{
    chunk_plan, gen_poisson_trace, kv_bytes, layer_kernels, LengthSampler, ModelSpec, Request, SeqSpan,
};

const SLO: SloSpec = SloSpec {
    norm_ttft_s_per_token: 1.5e-3,
    tpot_s: 0.2,
};

fn toy_model(layers: u32) -> ModelSpec {
    ModelSpec {
        num_layers: layers,
        ..ModelSpec::llama3_8b()
    }
}

fn quiet(policy: Policy, model: ModelSpec) -> SimConfig {
    let mut cfg = SimConfig::new(GpuSpec::a100(), model, SLO, policy, 80_000_000_000);
    cfg.noise_sigma = 0.0;
    cfg
}

fn req(id: u64, arrival_s: f64, input_len: u64, output_len: u64) -> Request {
    Request {
        id,
        arrival_s,
        input_len,
        output_len,
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn single_request_ttft_is_the_sum_of_its_cycles() {
    for l_step in [1, 2, 4] {
        let mut cfg = quiet(Policy::Bullet, toy_model(4));
        cfg.sched.l_step = l_step;
        let out = run(&cfg, &[req(0, 0.5, 3000, 1)]).unwrap();
        let oracle = cfg.oracle();
        let layer = oracle
            .prefill_layer(&ExecutionState::prefill_only(vec![3000], 108))
            .unwrap();
        let cycles = 4u32.div_ceil(l_step) as f64;
        let expect = cycles * cfg.sched.cycle_overhead_s() + 4.0 * layer;
        let m = &out.metrics.requests[0];
        assert!(
            rel(m.ttft_s, expect) < 1e-12,
            "l_step {l_step}: {} vs {expect}",
            m.ttft_s
        );
        assert_eq!(out.decisions.len(), cycles as usize);
    }
}

#[test]
fn decode_only_tpot_is_the_mean_oracle_step() {
    let cfg = quiet(Policy::Bullet, ModelSpec::llama3_8b());
    let (input, output) = (700u64, 20u64);
    let out = run(&cfg, &[req(0, 0.0, input, output)]).unwrap();
    let oracle = cfg.oracle();
    let steps: f64 = (1..output)
        .map(|k| {
            oracle
                .decode_step(&ExecutionState::decode_only(vec![input + k], 108))
                .unwrap()
        })
        .sum();
    let tpot = out.metrics.requests[0].tpot_s;
    assert!(rel(tpot, steps / (output - 1) as f64) < 1e-12);
}

#[test]
fn runs_are_byte_identical() {
    let trace = gen_poisson_trace(3.0, 10.0, &LengthSampler::preset("sharegpt-like").unwrap(), 4).unwrap();
    for policy in [
        Policy::Bullet,
        Policy::Chunked { chunk_size: 512 },
        Policy::Static { prefill_sms: 90 },
    ] {
        for noise in [0.0, 0.035] {
            let mut cfg = quiet(policy.clone(), ModelSpec::llama3_8b());
            cfg.noise_sigma = noise;
            cfg.seed = 11;
            let render = || {
                let o = run(&cfg, &trace).unwrap();
                (
                    metrics_json(&o.metrics),
                    requests_csv(&o.metrics),
                    decisions_jsonl(&o.decisions),
                    timeline_csv(&o.timeline),
                )
            };
            assert_eq!(render(), render());
        }
    }
}

#[test]
fn static_zero_prefill_sms_never_progresses() {
    let cfg = quiet(Policy::Static { prefill_sms: 0 }, ModelSpec::llama3_8b());
    let out = run(&cfg, &[req(0, 0.0, 100, 5), req(1, 0.1, 200, 5)]).unwrap();
    assert_eq!(out.metrics.aggregates.incomplete, 2);
    assert!(out.records.iter().all(|r| r.token_times.is_empty()));
    assert_eq!(out.metrics.queue_timeline.last().unwrap().1, 2);
}

#[test]
fn chunked_long_prompt_iterations_grow() {
    let cfg = quiet(Policy::Chunked { chunk_size: 1024 }, ModelSpec::llama3_8b());
    let out = run(&cfg, &[req(0, 0.0, 16384, 1)]).unwrap();
    assert_eq!(out.iterations.len(), 16);
    for w in out.iterations.windows(2) {
        assert!(w[1].latency_s > w[0].latency_s);
    }
    let ttft: f64 = out.iterations.iter().map(|i| i.latency_s).sum();
    assert!(rel(out.metrics.requests[0].ttft_s, ttft) < 1e-12);
}

#[test]
fn short_prompt_chunked_matches_unchunked() {
    let trace = [req(0, 0.0, 900, 1)];
    let chunked = run(
        &quiet(Policy::Chunked { chunk_size: 1024 }, ModelSpec::llama3_8b()),
        &trace,
    )
    .unwrap();
    let whole = run(&quiet(Policy::Nopartition, ModelSpec::llama3_8b()), &trace).unwrap();
    assert!(rel(chunked.metrics.requests[0].ttft_s, whole.metrics.requests[0].ttft_s) < 1e-12);
}

#[test]
fn full_decode_budget_starves_prefill() {
    // two one-token prompts fill cs = 2 and then decode for a long time
    let trace = [req(0, 0.0, 1, 400), req(1, 0.0, 1, 400), req(2, 0.01, 64, 2)];
    let out = run(
        &quiet(Policy::Chunked { chunk_size: 2 }, ModelSpec::llama3_8b()),
        &trace,
    )
    .unwrap();
    let decode_end = out.records[0]
        .token_times
        .last()
        .unwrap()
        .min(*out.records[1].token_times.last().unwrap());
    assert!(out.records[2].token_times[0] > decode_end);
}

#[test]
fn kv_exhaustion_holds_requests_in_queue() {
    let model = ModelSpec::llama3_8b();
    let one = kv_bytes(&model, 2000 + 50);
    let trace = [req(0, 0.0, 2000, 50), req(1, 0.001, 2000, 50)];
    for policy in [
        Policy::Bullet,
        Policy::Chunked { chunk_size: 1024 },
        Policy::Nopartition,
    ] {
        let mut cfg = quiet(policy, model.clone());
        // room for one and a half requests
        cfg.kv_pool_bytes = model.weight_bytes() + one + one / 2;
        let out = run(&cfg, &trace).unwrap();
        assert_eq!(out.metrics.aggregates.finished, 2);
        assert_eq!(out.audit.kv_peak_bytes, one);
        assert_eq!(out.audit.kv_mismatches, 0);
        // the second request waits for the first to release its cache
        let first_done = *out.records[0].token_times.last().unwrap();
        assert!(out.records[1].token_times[0] > first_done);
        assert!(out.metrics.queue_timeline.iter().any(|&(_, q)| q == 1));
    }
}

#[test]
fn dense_calibration_reproduces_the_oracle() {
    let mut cfg = quiet(Policy::Bullet, ModelSpec::llama3_8b());
    cfg.calibration_samples = CalibrationSamples::All;
    let est = Predictor::build(&cfg).unwrap();
    let oracle = cfg.oracle();
    let states = [
        ExecutionState::prefill_only(vec![1500, 300], 70),
        ExecutionState::decode_only(vec![900; 12], 20),
        ExecutionState {
            prefill_lens: vec![4096],
            prefill_prefix: vec![],
            prefill_sms: 80,
            decode_ctx_lens: vec![2048; 32],
            decode_sms: 28,
        },
    ];
    for es in &states {
        assert_eq!(est.estimate(es).unwrap(), oracle.exact(es).unwrap());
    }
}

#[test]
fn chunked_gemm_time_is_chunk_invariant() {
    let (gpu, model) = (GpuSpec::a100(), ModelSpec::llama3_8b());
    let gemm_time = |spans: &[SeqSpan]| -> f64 {
        layer_kernels(&model, Phase::Prefill, spans)
            .unwrap()
            .iter()
            .filter(|k| k.group != KernelGroup::Attention)
            .map(|k| srm_latency(k, &gpu, gpu.num_sms).unwrap())
            .sum()
    };
    let plan = chunk_plan(16384, 1024, 0).unwrap();
    let chunked: f64 = (0..plan.chunk_sizes.len())
        .map(|i| gemm_time(&[SeqSpan::chunk(plan.prefix_before(i), plan.chunk_sizes[i])]))
        .sum();
    assert!(rel(chunked, gemm_time(&[SeqSpan::prefill(16384)])) < 1e-9);
}

#[test]
fn work_conservation_and_kv_audit_under_load() {
    let trace = gen_poisson_trace(6.0, 30.0, &LengthSampler::preset("code-like").unwrap(), 5).unwrap();
    let out = run(
        &SimConfig::new(
            GpuSpec::a100(),
            ModelSpec::llama3_8b(),
            SLO,
            Policy::Bullet,
            80_000_000_000,
        ),
        &trace,
    )
    .unwrap();
    assert_eq!(out.audit.partition_gaps, 0);
    assert_eq!(out.audit.kv_mismatches, 0);
    assert_eq!(out.audit.out_of_order, 0);
    assert_eq!(out.metrics.aggregates.finished, trace.len());
}
