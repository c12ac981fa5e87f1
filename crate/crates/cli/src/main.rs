use clap::{Parser, Subcommand};
use smshare_core::config::ExperimentConfig;
use smshare_core::engine::{self, report, CalibrationPlan, GroundTruthOracle, OracleConfig, Policy};
use smshare_core::perf_model::{Estimator, GpuSpec};
use smshare_core::workload::{gen_poisson_trace, wave_profile, write_trace, LengthSampler, ModelSpec, Tiling};
use smshare_core::Error;
use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

mod sweep;

#[derive(Debug, Parser)]
#[command(name = "smshare", version, about = "SM-partitioned LLM serving simulator")]
struct Cli {
    /// Experiment TOML file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the experiment / generator seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Per-kernel wave-quantization idle ratios of a prefill layer.
    Wave {
        #[arg(long, default_value = "llama3-8b")]
        model: String,
        #[arg(long, default_value = "a100")]
        gpu: String,
        #[arg(long, value_delimiter = ',', default_values_t = [1024u64, 2048, 4096, 8192, 16384])]
        seq: Vec<u64>,
        /// Emit CSV instead of a table.
        #[arg(long)]
        csv: bool,
    },
    /// Write a Poisson JSONL trace.
    GenTrace {
        /// Arrivals per second.
        #[arg(long)]
        rate: f64,
        #[arg(long)]
        duration: f64,
        /// Length preset: sharegpt-like, code-like or summary-like.
        #[arg(long, default_value = "sharegpt-like")]
        dist: String,
        /// Output file (default `<out>/trace.jsonl`).
        #[arg(long)]
        path: Option<PathBuf>,
    },
    /// Run one simulation and write its reports.
    Simulate {
        /// Policy override: bullet, nopartition, chunked-<cs>, static-<pm>.
        #[arg(long)]
        policy: Option<String>,
        /// Trace override (JSONL).
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Cross-product parameter sweep, one CSV row per point.
    Sweep {
        /// `name=spec`, e.g. `pm=84..108:4`, `cs={512,1024,2048}`, `policy=bullet,chunked-1024`.
        #[arg(long = "axis", required = true)]
        axes: Vec<String>,
    },
    /// Fit a calibration store from sparse oracle samples and report MAPE
    /// against the dense grid.
    Calibrate {
        /// `default`, `all`, or a TOML calibration plan.
        #[arg(long, default_value = "default")]
        budget: String,
        /// Replace the plan's decode SM samples.
        #[arg(long, value_delimiter = ',')]
        decode_sms: Option<Vec<u32>>,
        /// Replace the plan's decode token samples.
        #[arg(long, value_delimiter = ',')]
        decode_tokens: Option<Vec<u64>>,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// SM spacing of the evaluation grid.
        #[arg(long, default_value_t = 2)]
        sm_step: u32,
        #[arg(long, default_value = "llama3-8b")]
        model: String,
        #[arg(long, default_value = "a100")]
        gpu: String,
    },
    /// Compare two metrics reports (files or run directories).
    Diff { a: PathBuf, b: PathBuf },
}

/// Failure with its exit code: 2 for bad input, 3 for runtime errors.
#[derive(Debug)]
struct Failure(u8, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(if e.is_config_error() { 2 } else { 3 }, e.to_string())
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure(2, msg.into())
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

fn dispatch(cli: &Cli) -> CmdResult {
    match &cli.cmd {
        Cmd::Wave { model, gpu, seq, csv } => cmd_wave(cli, model, gpu, seq, *csv),
        Cmd::GenTrace {
            rate,
            duration,
            dist,
            path,
        } => cmd_gen_trace(cli, *rate, *duration, dist, path.as_deref()),
        Cmd::Simulate { policy, trace } => cmd_simulate(cli, policy.as_deref(), trace.as_deref()),
        Cmd::Sweep { axes } => sweep::cmd_sweep(cli, axes),
        Cmd::Calibrate {
            budget,
            decode_sms,
            decode_tokens,
            noise,
            sm_step,
            model,
            gpu,
        } => cmd_calibrate(cli, budget, decode_sms, decode_tokens, *noise, *sm_step, model, gpu),
        Cmd::Diff { a, b } => cmd_diff(cli, a, b),
    }
}

fn say(cli: &Cli, s: &str) {
    if !cli.quiet {
        println!("{s}");
    }
}

fn out_dir(cli: &Cli, fallback: &Path) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| fallback.to_path_buf())
}

pub(crate) fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let path = cli.config.as_ref().ok_or_else(|| usage("--config is required"))?;
    // an unreadable config is bad input too
    let mut cfg = ExperimentConfig::load(path).map_err(|e| Failure(2, e.to_string()))?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
        if let Some(t) = cfg.trace.as_mut() {
            t.seed = Some(s);
        }
    }
    Ok(cfg)
}

fn gpu_preset(name: &str) -> Result<GpuSpec, Failure> {
    GpuSpec::preset(name).ok_or_else(|| usage(format!("unknown gpu preset `{name}` (a100, h100, h20)")))
}

fn model_preset(name: &str) -> Result<ModelSpec, Failure> {
    ModelSpec::preset(name).ok_or_else(|| {
        usage(format!(
            "unknown model preset `{name}` (llama3-8b, llama3-70b, moe-fp8)"
        ))
    })
}

fn write_file(path: &Path, body: &str) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure(3, format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, body).map_err(|e| Failure(3, format!("{}: {e}", path.display())))
}

fn cmd_wave(cli: &Cli, model: &str, gpu: &str, seqs: &[u64], csv: bool) -> CmdResult {
    let (model, gpu) = (model_preset(model)?, gpu_preset(gpu)?);
    if seqs.is_empty() || seqs.contains(&0) {
        return Err(usage("--seq needs positive lengths"));
    }
    // wave.csv is always CSV
    let csv = csv || cli.out.is_some();
    let mut s = String::new();
    if csv {
        s.push_str("seq_len,kernel,grid_blocks,waves,tail_sms,idle_ratio\n");
    }
    for &sl in seqs {
        let p = wave_profile(&model, &Tiling::default(), &gpu, sl)?;
        for k in &p.kernels {
            if csv {
                let _ = writeln!(
                    s,
                    "{sl},{},{},{},{},{}",
                    k.name, k.grid_blocks, k.stats.waves, k.stats.tail_sms, k.stats.idle_ratio
                );
            } else {
                let _ = writeln!(
                    s,
                    "{sl:>7} {:<12} grid {:>6} waves {:>4} tail {:>4} idle {:>5.1}%",
                    k.name,
                    k.grid_blocks,
                    k.stats.waves,
                    k.stats.tail_sms,
                    k.stats.idle_ratio * 100.0
                );
            }
        }
        if csv {
            let _ = writeln!(s, "{sl},layer_total,,,,{}", p.layer_idle);
        } else {
            let _ = writeln!(s, "{sl:>7} {:<12} {:>44.1}%", "layer_total", p.layer_idle * 100.0);
        }
    }
    match &cli.out {
        Some(dir) => write_file(&dir.join("wave.csv"), &s),
        None => {
            print!("{s}");
            Ok(())
        }
    }
}

fn cmd_gen_trace(cli: &Cli, rate: f64, duration: f64, dist: &str, path: Option<&Path>) -> CmdResult {
    let lengths = LengthSampler::preset(dist)
        .ok_or_else(|| usage(format!("unknown --dist `{dist}` (one of {:?})", LengthSampler::PRESETS)))?;
    let trace = gen_poisson_trace(rate, duration, &lengths, cli.seed.unwrap_or(0))?;
    let path = path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out_dir(cli, Path::new(".")).join("trace.jsonl"));
    let mut buf = Vec::new();
    write_trace(BufWriter::new(&mut buf), &trace)?;
    write_file(&path, std::str::from_utf8(&buf).expect("trace is UTF-8"))?;
    say(cli, &format!("wrote {} requests to {}", trace.len(), path.display()));
    Ok(())
}

fn cmd_simulate(cli: &Cli, policy: Option<&str>, trace: Option<&Path>) -> CmdResult {
    let mut cfg = load_config(cli)?;
    if let Some(p) = policy {
        cfg.policy = p.parse::<Policy>()?;
    }
    let trace = match trace {
        Some(p) => {
            let f = fs::File::open(p).map_err(|e| Failure(2, format!("{}: {e}", p.display())))?;
            smshare_core::workload::read_trace(std::io::BufReader::new(f), &p.display().to_string())?
        }
        None => cfg.load_trace()?,
    };
    let out = engine::run(&cfg.sim_config()?, &trace)?;
    let dir = out_dir(cli, &cfg.out_dir);
    report::write_reports(&dir, &out)?;
    say(cli, &out.metrics.summary_line());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_calibrate(
    cli: &Cli,
    budget: &str,
    decode_sms: &Option<Vec<u32>>,
    decode_tokens: &Option<Vec<u64>>,
    noise: f64,
    sm_step: u32,
    model: &str,
    gpu: &str,
) -> CmdResult {
    let (gpu, model, oracle_cfg) = match &cli.config {
        Some(_) => {
            let c = load_config(cli)?;
            (c.gpu.0, c.model.0, c.oracle)
        }
        None => (gpu_preset(gpu)?, model_preset(model)?, OracleConfig::default()),
    };
    oracle_cfg.validate()?;
    if !(noise >= 0.0) {
        return Err(usage("--noise must be >= 0"));
    }
    let mut plan = match budget {
        "default" => CalibrationPlan::default_for(&gpu),
        "all" => CalibrationPlan::dense_for(&gpu, sm_step),
        path => {
            let text = fs::read_to_string(path).map_err(|e| Failure(2, format!("{path}: {e}")))?;
            toml::from_str(&text).map_err(|e| Failure(2, format!("{path}: {e}")))?
        }
    };
    if let Some(s) = decode_sms {
        plan.decode_sms = s.clone();
    }
    if let Some(t) = decode_tokens {
        plan.decode_tokens = t.clone();
    }
    let oracle = GroundTruthOracle::new(gpu.clone(), model.clone(), oracle_cfg, noise);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cli.seed.unwrap_or(0));
    let store = engine::profile(&oracle, &plan, &mut rng)?;
    let est = Estimator::new(gpu.clone(), model, store.clone());
    let exact = GroundTruthOracle {
        noise_sigma: 0.0,
        ..oracle
    };
    let (p, d) = engine::dense_grid(&gpu, sm_step);
    let mape = engine::evaluate(&est, &exact, &p, &d)?;
    let dir = out_dir(cli, Path::new("."));
    fs::create_dir_all(&dir).map_err(|e| Failure(3, format!("{}: {e}", dir.display())))?;
    store.save(&dir.join("calibration.jsonl"))?;
    write_file(
        &dir.join("mape.json"),
        &(serde_json::to_string_pretty(&mape).expect("mape serialize") + "\n"),
    )?;
    say(
        cli,
        &format!(
            "prefill MAPE {:.2}% over {} points | decode MAPE {:.2}% over {} points",
            mape.prefill_mape * 100.0,
            mape.prefill_points,
            mape.decode_mape * 100.0,
            mape.decode_points
        ),
    );
    Ok(())
}

fn cmd_diff(cli: &Cli, a: &Path, b: &Path) -> CmdResult {
    let (ra, rb) = (report::read_metrics(a)?, report::read_metrics(b)?);
    let mut s = String::new();
    let _ = writeln!(s, "A: {}", ra.summary_line());
    let _ = writeln!(s, "B: {}", rb.summary_line());
    let _ = writeln!(s, "{:<28} {:>14} {:>14} {:>9}", "metric", "A", "B", "B/A");
    for (name, x, y, r) in report::diff_metrics(&ra, &rb) {
        let _ = writeln!(s, "{name:<28} {x:>14.6} {y:>14.6} {r:>9.3}");
    }
    say(cli, s.trim_end());
    Ok(())
}
