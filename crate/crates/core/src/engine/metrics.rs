use super::RequestRecord;
use crate::scheduler::SloSpec;
use crate::stats::{mean, quantile};
use serde::{Deserialize, Serialize};

/// Per-request latency figures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestMetrics {
    pub id: u64,
    pub arrival_s: f64,
    pub input_len: u64,
    pub output_len: u64,
    pub ttft_s: f64,
    pub norm_ttft_s_per_token: f64,
    pub tpot_s: f64,
    pub finished: bool,
}

impl RequestMetrics {
    pub fn meets(&self, slo: &SloSpec) -> bool {
        self.finished && self.norm_ttft_s_per_token <= slo.norm_ttft_s_per_token && self.tpot_s <= slo.tpot_s
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub requests: usize,
    pub finished: usize,
    pub incomplete: usize,
    pub ttft_mean_s: f64,
    pub ttft_p90_s: f64,
    pub ttft_p99_s: f64,
    pub norm_ttft_mean_s_per_token: f64,
    pub tpot_mean_s: f64,
    pub tpot_p90_s: f64,
    pub tpot_p99_s: f64,
    pub throughput_rps: f64,
    pub slo_attainment: f64,
    /// Time-averaged fraction of SMs running prefill / decode kernels.
    pub prefill_sm_occupancy: f64,
    pub decode_sm_occupancy: f64,
    pub mean_queue_len: f64,
    pub makespan_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub policy: String,
    pub slo: Option<SloSpec>,
    pub aggregates: Aggregates,
    /// Queue length after every change, `(t, len)`.
    pub queue_timeline: Vec<(f64, usize)>,
    #[serde(skip)]
    pub requests: Vec<RequestMetrics>,
}

impl MetricsReport {
    pub fn summary_line(&self) -> String {
        let a = &self.aggregates;
        format!(
            "{}: {} done ({} incomplete) | {:.3} req/s | TTFT mean {:.1} ms p90 {:.1} ms | TPOT mean {:.1} ms | SLO {:.1}%",
            self.policy,
            a.finished,
            a.incomplete,
            a.throughput_rps,
            a.ttft_mean_s * 1e3,
            a.ttft_p90_s * 1e3,
            a.tpot_mean_s * 1e3,
            a.slo_attainment * 100.0
        )
    }
}

pub fn request_metrics(r: &RequestRecord) -> RequestMetrics {
    let req = &r.request;
    let finished = r.is_finished();
    let (ttft, tpot) = match (r.token_times.first(), r.token_times.last()) {
        (Some(&first), Some(&last)) => {
            let tpot = if req.output_len >= 2 && finished {
                (last - first) / (req.output_len - 1) as f64
            } else {
                0.0
            };
            (first - req.arrival_s, tpot)
        }
        _ => (f64::NAN, f64::NAN),
    };
    RequestMetrics {
        id: req.id,
        arrival_s: req.arrival_s,
        input_len: req.input_len,
        output_len: req.output_len,
        ttft_s: ttft,
        norm_ttft_s_per_token: ttft / req.input_len as f64,
        tpot_s: tpot,
        finished,
    }
}

/// Per-request and aggregate latency metrics. Unfinished requests are only
/// counted in `incomplete`.
pub fn compute_metrics(records: &[RequestRecord], slo: &SloSpec) -> MetricsReport {
    let requests: Vec<RequestMetrics> = records.iter().map(request_metrics).collect();
    let done: Vec<&RequestMetrics> = requests.iter().filter(|m| m.finished).collect();
    let ttft: Vec<f64> = done.iter().map(|m| m.ttft_s).collect();
    let norm: Vec<f64> = done.iter().map(|m| m.norm_ttft_s_per_token).collect();
    let tpot: Vec<f64> = done.iter().map(|m| m.tpot_s).collect();
    let first_arrival = records
        .iter()
        .map(|r| r.request.arrival_s)
        .fold(f64::INFINITY, f64::min);
    let last_finish = records
        .iter()
        .filter(|r| r.is_finished())
        .filter_map(|r| r.token_times.last().copied())
        .fold(f64::NEG_INFINITY, f64::max);
    let span = last_finish - first_arrival;
    let q = |v: &[f64], p: f64| quantile(v, p).unwrap_or(0.0);
    let aggregates = Aggregates {
        requests: records.len(),
        finished: done.len(),
        incomplete: records.len() - done.len(),
        ttft_mean_s: mean(&ttft).unwrap_or(0.0),
        ttft_p90_s: q(&ttft, 0.9),
        ttft_p99_s: q(&ttft, 0.99),
        norm_ttft_mean_s_per_token: mean(&norm).unwrap_or(0.0),
        tpot_mean_s: mean(&tpot).unwrap_or(0.0),
        tpot_p90_s: q(&tpot, 0.9),
        tpot_p99_s: q(&tpot, 0.99),
        throughput_rps: if span > 0.0 { done.len() as f64 / span } else { 0.0 },
        slo_attainment: if done.is_empty() {
            0.0
        } else {
            done.iter().filter(|m| m.meets(slo)).count() as f64 / done.len() as f64
        },
        makespan_s: if span.is_finite() { span.max(0.0) } else { 0.0 },
        ..Default::default()
    };
    MetricsReport {
        policy: String::new(),
        slo: Some(*slo),
        aggregates,
        queue_timeline: Vec::new(),
        requests,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::Request;

    fn record(id: u64, input: u64, times: &[f64]) -> RequestRecord {
        let mut r = RequestRecord::new(Request {
            id,
            arrival_s: 0.0,
            input_len: input,
            output_len: times.len() as u64,
        });
        for &t in times {
            r.emit(t).unwrap();
        }
        r
    }

    #[test]
    fn normalized_ttft_and_tpot() {
        let r = record(1, 1000, &[0.5, 0.6]);
        let m = request_metrics(&r);
        assert!((m.norm_ttft_s_per_token - 0.5e-3).abs() < 1e-15);
        let times: Vec<f64> = (0..10).map(|i| 1.0 + 0.1 * i as f64).collect();
        let m = request_metrics(&record(2, 10, &times));
        assert!((m.tpot_s - 0.1).abs() < 1e-12);
        assert_eq!(request_metrics(&record(3, 10, &[0.2])).tpot_s, 0.0);
    }

    #[test]
    fn attainment_needs_both_bounds() {
        let slo = SloSpec {
            norm_ttft_s_per_token: 1e-3,
            tpot_s: 0.05,
        };
        let mut recs: Vec<RequestRecord> = (0..9).map(|i| record(i, 1000, &[0.5, 0.54])).collect();
        // meets TTFT, misses TPOT
        recs.push(record(9, 1000, &[0.5, 0.6]));
        let m = compute_metrics(&recs, &slo);
        assert!((m.aggregates.slo_attainment - 0.9).abs() < 1e-12);
        assert_eq!(m.aggregates.finished, 10);
    }

    #[test]
    fn unfinished_requests_are_excluded() {
        let slo = SloSpec {
            norm_ttft_s_per_token: 1e-3,
            tpot_s: 0.05,
        };
        let done = record(1, 100, &[0.1, 0.15]);
        let mut open = RequestRecord::new(Request {
            id: 2,
            arrival_s: 0.0,
            input_len: 100,
            output_len: 5,
        });
        open.emit(0.3).unwrap();
        let m = compute_metrics(&[done, open], &slo);
        assert_eq!(m.aggregates.incomplete, 1);
        assert!((m.aggregates.ttft_mean_s - 0.1).abs() < 1e-12);
        assert!((m.aggregates.throughput_rps - 1.0 / 0.15).abs() < 1e-9);
    }
}
