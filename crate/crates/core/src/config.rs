//! TOML experiment files.
//!
//! ```toml
//! gpu = "a100"                 # preset name, or an inline [gpu] table
//! model = "llama3-8b"          # likewise
//! policy = { kind = "bullet" } # chunked: { kind = "chunked", chunk_size = 1024 }
//! kv_pool_bytes = 80e9
//! seed = 7
//! out_dir = "runs/bullet"
//!
//! [slo]
//! norm_ttft_s_per_token = 1.5e-3
//! tpot_s = 0.2
//!
//! [trace]                      # either `path = "trace.jsonl"` or a generator
//! rate = 5.5
//! duration_s = 60
//! preset = "code-like"
//! ```
//!
//! `[sched]`, `[oracle]` and `[calibration_samples]` map onto the matching
//! simulator structs. Unknown keys are rejected with their line and column.

use crate::engine::{CalibrationSamples, OracleConfig, Policy, SimConfig};
use crate::error::{invalid, Error, Result};
use crate::perf_model::GpuSpec;
use crate::scheduler::{SchedulerConfig, SloSpec};
use crate::workload::{gen_poisson_trace, read_trace, LengthSampler, ModelSpec, Request};
use serde::de::{self, DeserializeOwned, MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use std::fmt;
use std::io::BufReader;
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

/// A spec given either by preset name or inline.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Spec<T>(pub T);

trait Preset: Sized {
    const WHAT: &'static str;
    fn lookup(name: &str) -> Option<Self>;
}

impl Preset for GpuSpec {
    const WHAT: &'static str = "gpu";
    fn lookup(name: &str) -> Option<Self> {
        GpuSpec::preset(name)
    }
}

impl Preset for ModelSpec {
    const WHAT: &'static str = "model";
    fn lookup(name: &str) -> Option<Self> {
        ModelSpec::preset(name)
    }
}

impl<'de, T: Preset + DeserializeOwned> Deserialize<'de> for Spec<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V<T>(PhantomData<T>);
        impl<'de, T: Preset + DeserializeOwned> Visitor<'de> for V<T> {
            type Value = Spec<T>;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                write!(f, "a {} preset name or table", T::WHAT)
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Spec<T>, E> {
                T::lookup(v)
                    .map(Spec)
                    .ok_or_else(|| E::custom(format!("unknown {} preset `{v}`", T::WHAT)))
            }
            fn visit_map<A: MapAccess<'de>>(self, map: A) -> std::result::Result<Spec<T>, A::Error> {
                T::deserialize(de::value::MapAccessDeserializer::new(map)).map(Spec)
            }
        }
        d.deserialize_any(V(PhantomData))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSpec {
    /// JSONL trace, relative to the config file.
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Poisson arrival rate, req/s.
    #[serde(default)]
    pub rate: Option<f64>,
    #[serde(default)]
    pub duration_s: Option<f64>,
    /// Length preset name; see [`LengthSampler::preset`].
    #[serde(default)]
    pub preset: Option<String>,
    /// Explicit length distributions (instead of `preset`).
    #[serde(default)]
    pub lengths: Option<LengthSampler>,
    /// Generator seed; defaults to the experiment seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl TraceSpec {
    pub fn sampler(&self) -> Result<LengthSampler> {
        match (&self.preset, &self.lengths) {
            (Some(_), Some(_)) => invalid("trace: give either `preset` or `lengths`, not both"),
            (Some(p), None) => LengthSampler::preset(p).ok_or_else(|| {
                Error::Config(format!(
                    "trace: unknown preset `{p}` (one of {:?})",
                    LengthSampler::PRESETS
                ))
            }),
            (None, Some(l)) => Ok(l.clone()),
            (None, None) => invalid("trace: a generator needs `preset` or `lengths`"),
        }
    }
}

fn default_kv_pool() -> u64 {
    80_000_000_000
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

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub gpu: Spec<GpuSpec>,
    pub model: Spec<ModelSpec>,
    pub slo: SloSpec,
    #[serde(default)]
    pub sched: SchedulerConfig,
    #[serde(default = "default_policy")]
    pub policy: Policy,
    /// Device memory for weights plus KV cache.
    #[serde(default = "default_kv_pool", deserialize_with = "bytes")]
    pub kv_pool_bytes: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    #[serde(default = "default_reconfig")]
    pub reconfig_s: f64,
    #[serde(default)]
    pub overlap_penalty: f64,
    #[serde(default = "default_decode_share")]
    pub overlap_decode_share: f64,
    #[serde(default)]
    pub calibration_samples: CalibrationSamples,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub horizon_s: Option<f64>,
    #[serde(default)]
    pub trace: Option<TraceSpec>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    /// Directory relative paths resolve against (the config file's).
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_policy() -> Policy {
    Policy::Bullet
}

/// Accept integer or float byte counts (`80e9`).
fn bytes<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<u64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum N {
        I(u64),
        F(f64),
    }
    match N::deserialize(d)? {
        N::I(v) => Ok(v),
        N::F(v) if v >= 0.0 && v.fract() == 0.0 && v < u64::MAX as f64 => Ok(v as u64),
        N::F(v) => Err(de::Error::custom(format!("expected a whole byte count, got {v}"))),
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        cfg.sim_config()?
            .validate()
            .map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text, &path.display().to_string())?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        Ok(SimConfig {
            gpu: self.gpu.0.clone(),
            model: self.model.0.clone(),
            slo: self.slo,
            sched: self.sched.clone(),
            policy: self.policy.clone(),
            kv_pool_bytes: self.kv_pool_bytes,
            seed: self.seed,
            noise_sigma: self.noise_sigma,
            reconfig_s: self.reconfig_s,
            overlap_penalty: self.overlap_penalty,
            overlap_decode_share: self.overlap_decode_share,
            calibration_samples: self.calibration_samples.clone(),
            oracle: self.oracle.clone(),
            horizon_s: self.horizon_s,
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Read or generate the configured trace.
    pub fn load_trace(&self) -> Result<Vec<Request>> {
        let Some(t) = &self.trace else {
            return Err(Error::Config("no [trace] section".into()));
        };
        match (&t.path, t.rate) {
            (Some(p), None) => {
                let p = self.resolve(p);
                let f = std::fs::File::open(&p).map_err(|e| Error::io(&p, e))?;
                read_trace(BufReader::new(f), &p.display().to_string())
            }
            (None, Some(rate)) => {
                let dur = t
                    .duration_s
                    .ok_or_else(|| Error::Config("trace: a generator needs `duration_s`".into()))?;
                gen_poisson_trace(rate, dur, &t.sampler()?, t.seed.unwrap_or(self.seed))
            }
            _ => Err(Error::Config("trace: give exactly one of `path` or `rate`".into())),
        }
    }
}
