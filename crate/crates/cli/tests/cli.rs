use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
gpu = "a100"
model = "llama3-8b"
seed = 3

[slo]
norm_ttft_s_per_token = 1.5e-3
tpot_s = 0.2

[trace]
rate = 2.0
duration_s = 6.0
preset = "sharegpt-like"
"#;

fn smshare(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smshare")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn config(dir: &Path, body: &str) -> String {
    let p = dir.join("exp.toml");
    fs::write(&p, body).unwrap();
    p.display().to_string()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = config(dir.path(), CONFIG);
    let out = s(&dir.path().join("run"));
    assert_eq!(
        code(&smshare(&["--quiet", "--config", &good, "--out", &out, "simulate"])),
        0
    );

    let missing = s(&dir.path().join("nope.toml"));
    assert_eq!(code(&smshare(&["--config", &missing, "simulate"])), 2);
    let bad = config(dir.path(), &CONFIG.replace("tpot_s = 0.2", "tpot_s = 0.2\nbogus = 1"));
    let o = smshare(&["--config", &bad, "simulate"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
    assert_eq!(code(&smshare(&["wave", "--gpu", "b200"])), 2);
    assert_eq!(
        code(&smshare(&[
            "calibrate",
            "--decode-sms",
            "54",
            "--decode-tokens",
            "4096"
        ])),
        2
    );
    assert_eq!(
        code(&smshare(&[
            "gen-trace",
            "--rate",
            "-1",
            "--duration",
            "5",
            "--path",
            &s(&dir.path().join("t"))
        ])),
        2
    );
    // a missing report is a runtime failure, not a config one
    assert_eq!(code(&smshare(&["diff", &missing, &missing])), 3);
}

#[test]
fn gen_trace_zero_rate_is_empty_and_seeded_traces_repeat() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    let o = smshare(&[
        "--quiet",
        "gen-trace",
        "--rate",
        "0",
        "--duration",
        "10",
        "--path",
        &s(&empty),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(&empty).unwrap(), "");

    let gen = |name: &str, seed: &str| {
        let p = dir.path().join(name);
        let args = [
            "--quiet",
            "--seed",
            seed,
            "gen-trace",
            "--rate",
            "4",
            "--duration",
            "10",
            "--dist",
            "code-like",
            "--path",
        ];
        assert_eq!(code(&smshare(&[&args[..], &[s(&p).as_str()]].concat())), 0);
        fs::read(p).unwrap()
    };
    assert_eq!(gen("a.jsonl", "5"), gen("b.jsonl", "5"));
    assert_ne!(gen("a.jsonl", "5"), gen("c.jsonl", "6"));
}

#[test]
fn simulate_is_deterministic_and_diff_reads_reports_back() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), CONFIG);
    let run = |name: &str, policy: &str| {
        let out = dir.path().join(name);
        let o = smshare(&["--config", &cfg, "--out", &s(&out), "simulate", "--policy", policy]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        (out, String::from_utf8(o.stdout).unwrap())
    };
    let (a, summary_a) = run("a", "bullet");
    let (b, _) = run("b", "bullet");
    for f in ["metrics.json", "requests.csv", "decisions.jsonl", "timeline.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let (c, summary_c) = run("c", "chunked-512");
    assert!(c.join("iterations.csv").exists());

    let d = smshare(&["diff", &s(&a), &s(&c.join("metrics.json"))]);
    assert_eq!(code(&d), 0);
    let text = String::from_utf8(d.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), format!("A: {}", summary_a.trim_end()));
    assert_eq!(lines.next().unwrap(), format!("B: {}", summary_c.trim_end()));
    assert!(text.contains("ttft_p90_s"));
}

#[test]
fn sweep_writes_one_row_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), CONFIG);
    let out = dir.path().join("sweep");
    let o = Command::new(env!("CARGO_BIN_EXE_smshare"))
        .env("SMSHARE_THREADS", "2")
        .args([
            "--quiet",
            "--config",
            &cfg,
            "--out",
            &s(&out),
            "sweep",
            "--axis",
            "pm=84..108:12",
            "--axis",
            "seed={1,2,3}",
        ])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 1 + 9);
    assert!(rows[0].starts_with("pm,seed,policy,"));
    assert!(rows[1].starts_with("84,1,static-84,"));
    assert!(rows[9].starts_with("108,3,static-108,"));
    assert!(out.join("pm=96_seed=2").join("metrics.json").exists());
    assert_eq!(code(&smshare(&["--config", &cfg, "sweep", "--axis", "warp=1,2"])), 2);
}

#[test]
fn calibrate_and_wave_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    let o = smshare(&["--out", &out, "calibrate", "--sm-step", "6"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mape: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("mape.json")).unwrap()).unwrap();
    assert!(mape["decode_mape"].as_f64().unwrap() <= 0.105);
    assert!(
        fs::read_to_string(dir.path().join("calibration.jsonl"))
            .unwrap()
            .lines()
            .count()
            > 4
    );

    assert_eq!(code(&smshare(&["--out", &out, "wave", "--seq", "1024"])), 0);
    let wave = fs::read_to_string(dir.path().join("wave.csv")).unwrap();
    let qkv = wave.lines().find(|l| l.starts_with("1024,qkv_proj,")).unwrap();
    assert!(qkv.contains(",384,4,60,"), "{qkv}");
}
