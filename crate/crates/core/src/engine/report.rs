use super::metrics::MetricsReport;
use super::sim::{SimOutput, TimelineRow};
use crate::error::{Error, Result};
use crate::scheduler::DecisionRecord;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub const METRICS_FILE: &str = "metrics.json";
pub const REQUESTS_FILE: &str = "requests.csv";
pub const DECISIONS_FILE: &str = "decisions.jsonl";
pub const TIMELINE_FILE: &str = "timeline.csv";
pub const ITERATIONS_FILE: &str = "iterations.csv";

pub fn metrics_json(m: &MetricsReport) -> String {
    let mut s = serde_json::to_string_pretty(m).expect("metrics serialize");
    s.push('\n');
    s
}

pub fn requests_csv(m: &MetricsReport) -> String {
    let mut s = String::from("id,arrival_s,ttft_s,norm_ttft_ms_per_tok,tpot_ms,finished\n");
    for r in &m.requests {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.id,
            r.arrival_s,
            r.ttft_s,
            r.norm_ttft_s_per_token * 1e3,
            r.tpot_s * 1e3,
            r.finished
        );
    }
    s
}

pub fn decisions_jsonl(d: &[DecisionRecord]) -> String {
    let mut s = String::new();
    for rec in d {
        s.push_str(&serde_json::to_string(rec).expect("decision serialize"));
        s.push('\n');
    }
    s
}

pub fn timeline_csv(rows: &[TimelineRow]) -> String {
    let mut s = String::from("t,pm,dm,queue_len,decode_batch\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.t, r.pm, r.dm, r.queue_len, r.decode_batch);
    }
    s
}

fn write(dir: &Path, name: &str, body: &str) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, body).map_err(|e| Error::io(&p, e))
}

/// Write every report artifact of one run into `dir` (created if missing).
pub fn write_reports(dir: &Path, out: &SimOutput) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(dir, METRICS_FILE, &metrics_json(&out.metrics))?;
    write(dir, REQUESTS_FILE, &requests_csv(&out.metrics))?;
    write(dir, DECISIONS_FILE, &decisions_jsonl(&out.decisions))?;
    write(dir, TIMELINE_FILE, &timeline_csv(&out.timeline))?;
    if !out.iterations.is_empty() {
        let mut s = String::from("index,start_s,latency_s,prefill_tokens,decode_tokens\n");
        for (i, it) in out.iterations.iter().enumerate() {
            let _ = writeln!(
                s,
                "{i},{},{},{},{}",
                it.start_s, it.latency_s, it.prefill_tokens, it.decode_tokens
            );
        }
        write(dir, ITERATIONS_FILE, &s)?;
    }
    Ok(())
}

/// Load a metrics report; accepts either the file or its run directory.
pub fn read_metrics(path: &Path) -> Result<MetricsReport> {
    let p = if path.is_dir() {
        path.join(METRICS_FILE)
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: p.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })
}

/// Side-by-side aggregate comparison: `(name, a, b, b/a)`.
pub fn diff_metrics(a: &MetricsReport, b: &MetricsReport) -> Vec<(&'static str, f64, f64, f64)> {
    let (x, y) = (&a.aggregates, &b.aggregates);
    let rows = [
        ("finished", x.finished as f64, y.finished as f64),
        ("incomplete", x.incomplete as f64, y.incomplete as f64),
        ("throughput_rps", x.throughput_rps, y.throughput_rps),
        ("ttft_mean_s", x.ttft_mean_s, y.ttft_mean_s),
        ("ttft_p90_s", x.ttft_p90_s, y.ttft_p90_s),
        ("ttft_p99_s", x.ttft_p99_s, y.ttft_p99_s),
        (
            "norm_ttft_mean_s_per_token",
            x.norm_ttft_mean_s_per_token,
            y.norm_ttft_mean_s_per_token,
        ),
        ("tpot_mean_s", x.tpot_mean_s, y.tpot_mean_s),
        ("tpot_p90_s", x.tpot_p90_s, y.tpot_p90_s),
        ("tpot_p99_s", x.tpot_p99_s, y.tpot_p99_s),
        ("slo_attainment", x.slo_attainment, y.slo_attainment),
        ("prefill_sm_occupancy", x.prefill_sm_occupancy, y.prefill_sm_occupancy),
        ("decode_sm_occupancy", x.decode_sm_occupancy, y.decode_sm_occupancy),
        ("mean_queue_len", x.mean_queue_len, y.mean_queue_len),
        ("makespan_s", x.makespan_s, y.makespan_s),
    ];
    rows.into_iter()
        .map(|(n, a, b)| (n, a, b, if a != 0.0 { b / a } else { f64::NAN }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{compute_metrics, RequestRecord};
    use crate::scheduler::SloSpec;
    use crate::workload::Request;

    #[test]
    fn metrics_round_trip() {
        let mut r = RequestRecord::new(Request {
            id: 3,
            arrival_s: 0.1,
            input_len: 700,
            output_len: 3,
        });
        for t in [0.4, 0.47, 0.5300000000000001] {
            r.emit(t).unwrap();
        }
        let slo = SloSpec {
            norm_ttft_s_per_token: 1.5e-3,
            tpot_s: 0.2,
        };
        let m = compute_metrics(&[r], &slo);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(METRICS_FILE);
        fs::write(&p, metrics_json(&m)).unwrap();
        let back = read_metrics(dir.path()).unwrap();
        assert_eq!(back.aggregates, m.aggregates);
        assert_eq!(back.summary_line(), m.summary_line());
        assert!(requests_csv(&m).lines().nth(1).unwrap().starts_with("3,0.1,"));
    }
}
