//! Sampled calibration factors and contention bandwidths.
//!
//! Alpha samples are keyed by `(phase, SMs, tokens)`. A lookup first
//! interpolates along the SM axis inside the two token columns nearest to
//! the query, then interpolates between those columns along the token
//! axis. Both steps extrapolate linearly beyond the sampled hull; the final
//! alpha is clamped to `[ALPHA_MIN, ALPHA_MAX]`.

use super::{scaled_peaks, GpuSpec};
use crate::error::{invalid, Error, Result};
use crate::stats::interp_linear;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

pub const ALPHA_MIN: f64 = 0.1;
pub const ALPHA_MAX: f64 = 20.0;
/// Lower clamp for extrapolated bandwidth, as a fraction of the uncontended peak.
const BW_FLOOR_FRACTION: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Prefill,
    Decode,
}

impl Phase {
    pub fn other(self) -> Phase {
        match self {
            Phase::Prefill => Phase::Decode,
            Phase::Decode => Phase::Prefill,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Prefill => "prefill",
            Phase::Decode => "decode",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AlphaKey {
    pub phase: Phase,
    pub sms: u32,
    pub tokens: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct AlphaSample {
    measured_s: f64,
    predicted_s: f64,
    alpha: f64,
}

/// Result of a contention-bandwidth lookup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContentionLookup {
    pub bytes_per_s: f64,
    /// Set when contention was requested but the table is empty, so the
    /// uncontended bandwidth was returned instead.
    pub fallback: bool,
}

/// One line of a calibration JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CalibrationRecord {
    Alpha {
        phase: Phase,
        sms: u32,
        tokens: u64,
        measured_s: f64,
        predicted_s: f64,
    },
    ContentionBw {
        kind: ContentionKind,
        sms: u32,
        prefill_len: u64,
        bytes_per_s: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContentionKind {
    #[serde(rename = "contention_bw")]
    ContentionBw,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibrationStore {
    // phase -> tokens -> sms -> sample
    alpha: BTreeMap<Phase, BTreeMap<u64, BTreeMap<u32, AlphaSample>>>,
    // sms -> prefill_len -> bytes/s
    contention: BTreeMap<u32, BTreeMap<u64, f64>>,
}

impl CalibrationStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alpha_len(&self) -> usize {
        self.alpha
            .values()
            .flat_map(|cols| cols.values())
            .map(|col| col.len())
            .sum()
    }

    pub fn alpha_len_for(&self, phase: Phase) -> usize {
        self.alpha
            .get(&phase)
            .map(|cols| cols.values().map(|c| c.len()).sum())
            .unwrap_or(0)
    }

    pub fn contention_len(&self) -> usize {
        self.contention.values().map(|row| row.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_len() == 0 && self.contention_len() == 0
    }

    /// Insert (or overwrite) an alpha sample derived from one measurement.
    pub fn insert_sample(&mut self, key: AlphaKey, measured_s: f64, predicted_s: f64) -> Result<()> {
        let alpha = super::calibrate(measured_s, predicted_s)?;
        self.alpha
            .entry(key.phase)
            .or_default()
            .entry(key.tokens)
            .or_default()
            .insert(
                key.sms,
                AlphaSample {
                    measured_s,
                    predicted_s,
                    alpha,
                },
            );
        Ok(())
    }

    /// Insert an alpha value directly (predicted latency normalised to 1 s).
    pub fn insert_alpha(&mut self, key: AlphaKey, alpha: f64) -> Result<()> {
        self.insert_sample(key, alpha, 1.0)
    }

    pub fn insert_contention(&mut self, sms: u32, prefill_len: u64, bytes_per_s: f64) -> Result<()> {
        if !(bytes_per_s > 0.0 && bytes_per_s.is_finite()) {
            return invalid("contention bandwidth must be positive");
        }
        self.contention.entry(sms).or_default().insert(prefill_len, bytes_per_s);
        Ok(())
    }

    /// Multiply every alpha sample by `factor`.
    pub fn scale_alphas(&mut self, factor: f64) {
        for col in self.alpha.values_mut().flat_map(|cols| cols.values_mut()) {
            for s in col.values_mut() {
                s.alpha *= factor;
                s.measured_s *= factor;
            }
        }
    }

    /// Interpolated alpha for `key`. Returns 1.0 when nothing was sampled.
    pub fn alpha(&self, key: AlphaKey) -> f64 {
        let cols = match self
            .alpha
            .get(&key.phase)
            .filter(|c| !c.is_empty())
            .or_else(|| self.alpha.get(&key.phase.other()).filter(|c| !c.is_empty()))
        {
            Some(cols) => cols,
            None => return 1.0,
        };
        let sms = key.sms as f64;
        let column_alpha = |col: &BTreeMap<u32, AlphaSample>| -> f64 {
            let pts: Vec<(f64, f64)> = col.iter().map(|(&s, v)| (s as f64, v.alpha)).collect();
            interp_linear(&pts, sms)
        };
        let token_pts: Vec<(f64, f64)> = bracket(cols, key.tokens)
            .into_iter()
            .map(|(t, col)| (t as f64, column_alpha(col)))
            .collect();
        interp_linear(&token_pts, key.tokens as f64).clamp(ALPHA_MIN, ALPHA_MAX)
    }

    /// Attainable memory bandwidth on `n_p` SMs while a prefill of
    /// `co_prefill_len` tokens runs on the remaining SMs.
    pub fn contention_bandwidth(&self, gpu: &GpuSpec, n_p: u32, co_prefill_len: u64) -> Result<ContentionLookup> {
        let d_p = scaled_peaks(gpu, n_p)?.d_p;
        if co_prefill_len == 0 {
            return Ok(ContentionLookup {
                bytes_per_s: d_p,
                fallback: false,
            });
        }
        if self.contention.is_empty() {
            log::warn!("contention table empty; using uncontended bandwidth");
            return Ok(ContentionLookup {
                bytes_per_s: d_p,
                fallback: true,
            });
        }
        let sl = co_prefill_len as f64;
        let row_pts: Vec<(f64, f64)> = bracket(&self.contention, n_p)
            .into_iter()
            .map(|(sms, row)| {
                let pts: Vec<(f64, f64)> = row.iter().map(|(&l, &bw)| (l as f64, bw)).collect();
                (sms as f64, interp_linear(&pts, sl))
            })
            .collect();
        let bw = interp_linear(&row_pts, n_p as f64);
        Ok(ContentionLookup {
            bytes_per_s: bw.clamp(d_p * BW_FLOOR_FRACTION, d_p),
            fallback: false,
        })
    }

    pub fn records(&self) -> Vec<CalibrationRecord> {
        let mut out = Vec::new();
        for (&phase, cols) in &self.alpha {
            for (&tokens, col) in cols {
                for (&sms, s) in col {
                    out.push(CalibrationRecord::Alpha {
                        phase,
                        sms,
                        tokens,
                        measured_s: s.measured_s,
                        predicted_s: s.predicted_s,
                    });
                }
            }
        }
        for (&sms, row) in &self.contention {
            for (&prefill_len, &bytes_per_s) in row {
                out.push(CalibrationRecord::ContentionBw {
                    kind: ContentionKind::ContentionBw,
                    sms,
                    prefill_len,
                    bytes_per_s,
                });
            }
        }
        out
    }

    pub fn apply(&mut self, record: &CalibrationRecord) -> Result<()> {
        match *record {
            CalibrationRecord::Alpha {
                phase,
                sms,
                tokens,
                measured_s,
                predicted_s,
            } => self.insert_sample(AlphaKey { phase, sms, tokens }, measured_s, predicted_s),
            CalibrationRecord::ContentionBw {
                sms,
                prefill_len,
                bytes_per_s,
                ..
            } => self.insert_contention(sms, prefill_len, bytes_per_s),
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for rec in self.records() {
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n").map_err(|e| Error::io("<calibration>", e))?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R, origin: &str) -> Result<Self> {
        let mut store = Self::new();
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::io(origin, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CalibrationRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            store.apply(&rec).map_err(|e| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(std::io::BufReader::new(f), &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_jsonl(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// The one or two entries of `map` used to interpolate at `key`: the
/// bracketing pair inside the hull, the two outermost entries beyond it.
fn bracket<K: Ord + Copy, V>(map: &BTreeMap<K, V>, key: K) -> Vec<(K, &V)> {
    if let Some(v) = map.get(&key) {
        return vec![(key, v)];
    }
    let below: Vec<_> = map.range(..key).rev().take(2).map(|(k, v)| (*k, v)).collect();
    let above: Vec<_> = map.range(key..).take(2).map(|(k, v)| (*k, v)).collect();
    let mut picked = match (below.first(), above.first()) {
        (Some(&b), Some(&a)) => vec![b, a],
        (Some(_), None) => below.into_iter().rev().collect(),
        (None, Some(_)) => above,
        (None, None) => Vec::new(),
    };
    picked.sort_by(|a, b| a.0.cmp(&b.0));
    picked
}
