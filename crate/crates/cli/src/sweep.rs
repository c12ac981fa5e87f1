use crate::{load_config, out_dir, say, usage, write_file, Cli, CmdResult, Failure};
use rayon::prelude::*;
use smshare_core::config::ExperimentConfig;
use smshare_core::engine::{self, report, Policy, SimOutput};
use std::fmt::Write as _;
use std::path::Path;

const AXES: &[&str] = &[
    "pm",
    "cs",
    "policy",
    "rate",
    "seed",
    "l_step",
    "sm_step",
    "tpot_headroom",
    "noise_sigma",
    "slo_scale",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub name: String,
    pub values: Vec<String>,
}

/// `name=a..b[:step]` (inclusive integers), `name={x,y}` or `name=x,y`.
pub fn parse_axis(spec: &str) -> Result<Axis, Failure> {
    let (name, vals) = spec
        .split_once('=')
        .ok_or_else(|| usage(format!("axis `{spec}`: expected name=values")))?;
    let name = name.trim();
    if !AXES.contains(&name) {
        return Err(usage(format!("unknown axis `{name}` (one of {AXES:?})")));
    }
    let vals = vals.trim();
    let values: Vec<String> = if let Some((lo, rest)) = vals.split_once("..") {
        let (hi, step) = rest.split_once(':').unwrap_or((rest, "1"));
        let p = |s: &str| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| usage(format!("axis `{name}`: bad range `{vals}`")))
        };
        let (lo, hi, step) = (p(lo)?, p(hi)?, p(step)?);
        if step == 0 {
            return Err(usage(format!("axis `{name}`: step must be >= 1")));
        }
        let mut v: Vec<String> = (lo..=hi).step_by(step as usize).map(|x| x.to_string()).collect();
        // always include the upper end
        if lo <= hi && v.last().map(String::as_str) != Some(hi.to_string().as_str()) {
            v.push(hi.to_string());
        }
        v
    } else {
        let inner = vals.strip_prefix('{').and_then(|s| s.strip_suffix('}')).unwrap_or(vals);
        inner
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect()
    };
    if values.is_empty() {
        return Err(usage(format!("axis `{name}` is empty")));
    }
    Ok(Axis {
        name: name.to_string(),
        values,
    })
}

fn num<T: std::str::FromStr>(axis: &str, v: &str) -> Result<T, Failure> {
    v.parse().map_err(|_| usage(format!("axis `{axis}`: bad value `{v}`")))
}

fn apply(cfg: &mut ExperimentConfig, axis: &str, v: &str) -> Result<(), Failure> {
    match axis {
        "pm" => {
            cfg.policy = Policy::Static {
                prefill_sms: num(axis, v)?,
            }
        }
        "cs" => {
            cfg.policy = Policy::Chunked {
                chunk_size: num(axis, v)?,
            }
        }
        "policy" => cfg.policy = v.parse()?,
        "rate" => {
            let t = cfg
                .trace
                .as_mut()
                .ok_or_else(|| usage("rate axis needs a generated [trace]"))?;
            t.rate = Some(num(axis, v)?);
            t.path = None;
        }
        "seed" => {
            cfg.seed = num(axis, v)?;
            if let Some(t) = cfg.trace.as_mut() {
                t.seed = Some(cfg.seed);
            }
        }
        "l_step" => cfg.sched.l_step = num(axis, v)?,
        "sm_step" => cfg.sched.sm_step = num(axis, v)?,
        "tpot_headroom" => cfg.sched.tpot_headroom = num(axis, v)?,
        "noise_sigma" => cfg.noise_sigma = num(axis, v)?,
        "slo_scale" => cfg.slo = cfg.slo.scaled(num(axis, v)?),
        _ => unreachable!("axis names are checked when parsed"),
    }
    Ok(())
}

/// Cross product of the axes, first axis varying slowest.
pub fn points(axes: &[Axis]) -> Vec<Vec<(String, String)>> {
    let mut out = vec![Vec::new()];
    for a in axes {
        out = out
            .into_iter()
            .flat_map(|p| {
                a.values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((a.name.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    out
}

fn run_point(base: &ExperimentConfig, point: &[(String, String)]) -> Result<SimOutput, Failure> {
    let mut cfg = base.clone();
    for (k, v) in point {
        apply(&mut cfg, k, v)?;
    }
    let sim = cfg.sim_config()?;
    sim.validate()?;
    let trace = cfg.load_trace()?;
    Ok(engine::run(&sim, &trace)?)
}

/// Latency of the first and last lockstep iterations that carried prefill
/// tokens (chunked runs only).
fn chunk_latencies(out: &SimOutput) -> (String, String) {
    let mut it = out.iterations.iter().filter(|i| i.prefill_tokens > 0);
    let first = it.next();
    let last = it.next_back().or(first);
    let f = |i: Option<&engine::IterationRecord>| i.map(|i| i.latency_s.to_string()).unwrap_or_default();
    (f(first), f(last))
}

pub fn cmd_sweep(cli: &Cli, specs: &[String]) -> CmdResult {
    let base = load_config(cli)?;
    let axes = specs.iter().map(|s| parse_axis(s)).collect::<Result<Vec<_>, _>>()?;
    let pts = points(&axes);
    let threads = std::env::var("SMSHARE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Failure(3, e.to_string()))?;
    let results: Vec<Result<SimOutput, Failure>> =
        pool.install(|| pts.par_iter().map(|p| run_point(&base, p)).collect());
    let dir = out_dir(cli, &base.out_dir);
    let mut csv = String::new();
    for a in &axes {
        let _ = write!(csv, "{},", a.name);
    }
    csv.push_str(
        "policy,finished,incomplete,throughput_rps,ttft_mean_s,ttft_p90_s,tpot_mean_s,tpot_p90_s,slo_attainment,mean_queue_len,iterations,first_chunk_s,last_chunk_s\n",
    );
    for (p, r) in pts.iter().zip(results) {
        let out = r?;
        let label: Vec<String> = p.iter().map(|(k, v)| format!("{k}={v}")).collect();
        report::write_reports(&dir.join(label.join("_")), &out)?;
        let a = &out.metrics.aggregates;
        let (first, last) = chunk_latencies(&out);
        for (_, v) in p {
            let _ = write!(csv, "{v},");
        }
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            out.metrics.policy,
            a.finished,
            a.incomplete,
            a.throughput_rps,
            a.ttft_mean_s,
            a.ttft_p90_s,
            a.tpot_mean_s,
            a.tpot_p90_s,
            a.slo_attainment,
            a.mean_queue_len,
            out.iterations.len(),
            first,
            last
        );
        say(cli, &format!("{}: {}", label.join(" "), out.metrics.summary_line()));
    }
    let path = dir.join("sweep.csv");
    write_file(&path, &csv)?;
    say(
        cli,
        &format!("wrote {} rows to {}", pts.len(), Path::new(&path).display()),
    );
    Ok(())
}
