use crate::error::{invalid, Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Request {
    pub id: u64,
    pub arrival_s: f64,
    pub input_len: u64,
    pub output_len: u64,
}

impl Request {
    pub fn validate(&self) -> Result<()> {
        if self.input_len == 0 || self.output_len == 0 {
            return invalid(format!("request {}: lengths must be >= 1", self.id));
        }
        if !(self.arrival_s >= 0.0 && self.arrival_s.is_finite()) {
            return invalid(format!("request {}: arrival must be a finite time >= 0", self.id));
        }
        Ok(())
    }
}

/// A token-length distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LenDist {
    Fixed {
        value: u64,
    },
    /// Inclusive integer range.
    Uniform {
        lo: u64,
        hi: u64,
    },
    /// exp(N(mu, sigma)), rounded and clamped to `[min, max]`.
    Lognormal {
        mu: f64,
        sigma: f64,
        #[serde(default = "one")]
        min: u64,
        #[serde(default = "max_len")]
        max: u64,
    },
    /// CSV histogram with a `len,probability` header.
    Empirical {
        path: PathBuf,
    },
}

fn one() -> u64 {
    1
}

fn max_len() -> u64 {
    131072
}

impl LenDist {
    fn lognormal_median(median: f64, sigma: f64, min: u64, max: u64) -> Self {
        LenDist::Lognormal {
            mu: median.ln(),
            sigma,
            min,
            max,
        }
    }
}

/// Input and output length distributions of a workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthSampler {
    pub input: LenDist,
    pub output: LenDist,
}

impl LengthSampler {
    /// Lognormal approximations of common serving workloads.
    ///
    /// | preset         | input median / sigma / range | output median / sigma / range |
    /// |----------------|------------------------------|-------------------------------|
    /// | `sharegpt-like`| 256 / 1.0 / 4..8192          | 200 / 0.9 / 4..2048           |
    /// | `code-like`    | 2048 / 0.6 / 64..16384       | 24 / 0.7 / 2..512             |
    /// | `summary-like` | 6000 / 0.5 / 512..32768      | 200 / 0.5 / 16..1024          |
    pub fn preset(name: &str) -> Option<Self> {
        let (i, o) = match name {
            "sharegpt-like" => (
                LenDist::lognormal_median(256.0, 1.0, 4, 8192),
                LenDist::lognormal_median(200.0, 0.9, 4, 2048),
            ),
            "code-like" => (
                LenDist::lognormal_median(2048.0, 0.6, 64, 16384),
                LenDist::lognormal_median(24.0, 0.7, 2, 512),
            ),
            "summary-like" => (
                LenDist::lognormal_median(6000.0, 0.5, 512, 32768),
                LenDist::lognormal_median(200.0, 0.5, 16, 1024),
            ),
            _ => return None,
        };
        Some(LengthSampler { input: i, output: o })
    }

    pub const PRESETS: [&'static str; 3] = ["sharegpt-like", "code-like", "summary-like"];
}

enum Compiled {
    Fixed(u64),
    Uniform(u64, u64),
    Lognormal(LogNormal<f64>, u64, u64),
    Table(Vec<(u64, f64)>),
}

impl Compiled {
    fn new(dist: &LenDist) -> Result<Self> {
        Ok(match dist {
            LenDist::Fixed { value } => {
                if *value == 0 {
                    return invalid("fixed length must be >= 1");
                }
                Compiled::Fixed(*value)
            }
            LenDist::Uniform { lo, hi } => {
                if *lo == 0 || lo > hi {
                    return invalid("uniform lengths need 1 <= lo <= hi");
                }
                Compiled::Uniform(*lo, *hi)
            }
            LenDist::Lognormal { mu, sigma, min, max } => {
                if *min == 0 || min > max {
                    return invalid("lognormal clamp needs 1 <= min <= max");
                }
                let d = LogNormal::new(*mu, *sigma).map_err(|e| Error::InvalidArgument(format!("lognormal: {e}")))?;
                Compiled::Lognormal(d, *min, *max)
            }
            LenDist::Empirical { path } => Compiled::Table(read_histogram(path)?),
        })
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> u64 {
        match self {
            Compiled::Fixed(v) => *v,
            Compiled::Uniform(lo, hi) => rng.random_range(*lo..=*hi),
            Compiled::Lognormal(d, lo, hi) => (d.sample(rng).round() as u64).clamp(*lo, *hi),
            Compiled::Table(cdf) => {
                let u: f64 = rng.random();
                let idx = cdf.partition_point(|&(_, c)| c <= u).min(cdf.len() - 1);
                cdf[idx].0
            }
        }
    }
}

/// Parse a `len,probability` histogram into a normalised CDF.
fn read_histogram(path: &Path) -> Result<Vec<(u64, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let origin = path.display().to_string();
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("len")) {
            continue;
        }
        let parse_err = |msg: &str| Error::Parse {
            path: origin.clone(),
            line: i + 1,
            msg: msg.to_string(),
        };
        let (l, p) = line
            .split_once(',')
            .ok_or_else(|| parse_err("expected len,probability"))?;
        let len: u64 = l.trim().parse().map_err(|_| parse_err("bad length"))?;
        let prob: f64 = p.trim().parse().map_err(|_| parse_err("bad probability"))?;
        if len == 0 || !(prob >= 0.0) {
            return Err(parse_err("length must be >= 1 and probability >= 0"));
        }
        rows.push((len, prob));
    }
    let total: f64 = rows.iter().map(|r| r.1).sum();
    if rows.is_empty() || !(total > 0.0) {
        return invalid(format!("{origin}: histogram has no probability mass"));
    }
    let mut acc = 0.0;
    Ok(rows
        .into_iter()
        .map(|(len, p)| {
            acc += p / total;
            (len, acc)
        })
        .collect())
}

/// Poisson arrivals at `rate` req/s over `[0, duration)` with lengths from
/// `lengths`. Deterministic in `seed`.
pub fn gen_poisson_trace(rate: f64, duration: f64, lengths: &LengthSampler, seed: u64) -> Result<Vec<Request>> {
    if !(rate >= 0.0 && rate.is_finite()) {
        return invalid("trace rate must be finite and >= 0");
    }
    if !(duration > 0.0 && duration.is_finite()) {
        return invalid("trace duration must be finite and > 0");
    }
    let input = Compiled::new(&lengths.input)?;
    let output = Compiled::new(&lengths.output)?;
    if rate == 0.0 {
        return Ok(Vec::new());
    }
    let gaps = Exp::new(rate).map_err(|e| Error::InvalidArgument(format!("exponential: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut t = 0.0;
    loop {
        t += gaps.sample(&mut rng);
        if t >= duration {
            break;
        }
        let input_len = input.sample(&mut rng);
        let output_len = output.sample(&mut rng);
        out.push(Request {
            id: out.len() as u64,
            arrival_s: t,
            input_len,
            output_len,
        });
    }
    Ok(out)
}

pub fn write_trace<W: Write>(mut w: W, trace: &[Request]) -> Result<()> {
    for r in trace {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io("<trace>", e))?;
    }
    Ok(())
}

/// Read a JSONL trace, validating each record and the arrival order.
pub fn read_trace<R: BufRead>(r: R, origin: &str) -> Result<Vec<Request>> {
    let mut out: Vec<Request> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |msg: String| Error::Parse {
            path: origin.to_string(),
            line: i + 1,
            msg,
        };
        let req: Request = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        req.validate().map_err(|e| at(e.to_string()))?;
        if let Some(prev) = out.last() {
            if req.arrival_s < prev.arrival_s {
                return Err(at("trace is not sorted by arrival".into()));
            }
        }
        out.push(req);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed() -> LengthSampler {
        LengthSampler {
            input: LenDist::Fixed { value: 100 },
            output: LenDist::Fixed { value: 10 },
        }
    }

    #[test]
    fn zero_rate_is_empty() {
        assert!(gen_poisson_trace(0.0, 10.0, &fixed(), 1).unwrap().is_empty());
    }

    #[test]
    fn rejects_negative_inputs() {
        assert!(gen_poisson_trace(-1.0, 10.0, &fixed(), 1).is_err());
        assert!(gen_poisson_trace(1.0, -10.0, &fixed(), 1).is_err());
        assert!(gen_poisson_trace(1.0, 0.0, &fixed(), 1).is_err());
    }

    #[test]
    fn mean_gap_matches_rate() {
        let t = gen_poisson_trace(10.0, 1000.0, &fixed(), 42).unwrap();
        let mean_gap = t.last().unwrap().arrival_s / t.len() as f64;
        assert!((mean_gap - 0.1).abs() < 0.005, "mean gap {mean_gap}");
    }

    #[test]
    fn deterministic_and_sorted() {
        let s = LengthSampler::preset("code-like").unwrap();
        let a = gen_poisson_trace(5.0, 60.0, &s, 9).unwrap();
        let b = gen_poisson_trace(5.0, 60.0, &s, 9).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        write_trace(&mut ba, &a).unwrap();
        write_trace(&mut bb, &b).unwrap();
        assert_eq!(ba, bb);
        assert!(a.windows(2).all(|w| w[0].arrival_s <= w[1].arrival_s));
        let back = read_trace(&ba[..], "mem").unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn code_like_is_long_in_short_out() {
        let s = LengthSampler::preset("code-like").unwrap();
        let t = gen_poisson_trace(50.0, 100.0, &s, 3).unwrap();
        let n = t.len() as f64;
        let mean_in = t.iter().map(|r| r.input_len as f64).sum::<f64>() / n;
        let mean_out = t.iter().map(|r| r.output_len as f64).sum::<f64>() / n;
        assert!(mean_in > 1500.0 && mean_out < 60.0, "{mean_in} {mean_out}");
        assert!(t.iter().all(|r| (64..=16384).contains(&r.input_len)));
    }

    #[test]
    fn empirical_histogram() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        std::fs::write(&p, "len,probability\n100,0.25\n200,0.75\n").unwrap();
        let s = LengthSampler {
            input: LenDist::Empirical { path: p },
            output: LenDist::Fixed { value: 1 },
        };
        let t = gen_poisson_trace(100.0, 100.0, &s, 5).unwrap();
        let short = t.iter().filter(|r| r.input_len == 100).count() as f64 / t.len() as f64;
        assert!(t.iter().all(|r| r.input_len == 100 || r.input_len == 200));
        assert!((short - 0.25).abs() < 0.03, "{short}");
    }

    #[test]
    fn unsorted_trace_rejected() {
        let text = "{\"id\":0,\"arrival_s\":1.0,\"input_len\":1,\"output_len\":1}\n{\"id\":1,\"arrival_s\":0.5,\"input_len\":1,\"output_len\":1}\n";
        assert!(matches!(
            read_trace(text.as_bytes(), "t"),
            Err(Error::Parse { line: 2, .. })
        ));
    }
}
