use crate::error::{invalid, Result};
use crate::workload::Request;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestState {
    Queued,
    Prefilling,
    Decoding,
    Finished,
}

/// Lifecycle of one request inside a simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub request: Request,
    pub prefill_done_s: Option<f64>,
    /// First decode step the request took part in (d_i).
    pub decode_start_s: Option<f64>,
    /// Emission time of every output token; the first is emitted by prefill.
    pub token_times: Vec<f64>,
    pub state: RequestState,
}

impl RequestRecord {
    pub fn new(request: Request) -> Self {
        RequestRecord {
            request,
            prefill_done_s: None,
            decode_start_s: None,
            token_times: Vec::new(),
            state: RequestState::Queued,
        }
    }

    pub fn id(&self) -> u64 {
        self.request.id
    }

    pub fn emitted(&self) -> u64 {
        self.token_times.len() as u64
    }

    /// Context length of the next decode step: prompt plus tokens emitted so far.
    pub fn context_len(&self) -> u64 {
        self.request.input_len + self.emitted()
    }

    pub fn is_finished(&self) -> bool {
        self.state == RequestState::Finished
    }

    /// Append a token; finishes the request once all output is emitted.
    pub fn emit(&mut self, t: f64) -> Result<()> {
        if let Some(&last) = self.token_times.last() {
            if t <= last {
                return invalid(format!("request {}: token time {t} not after {last}", self.id()));
            }
        }
        self.token_times.push(t);
        if self.emitted() >= self.request.output_len {
            self.state = RequestState::Finished;
        }
        Ok(())
    }
}

/// Shared KV-cache pool accounting, in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KvPool {
    pub capacity: u64,
    pub used: u64,
}

impl KvPool {
    pub fn new(capacity: u64) -> Self {
        KvPool { capacity, used: 0 }
    }

    pub fn free(&self) -> u64 {
        self.capacity - self.used
    }

    pub fn fits(&self, bytes: u64) -> bool {
        bytes <= self.free()
    }

    pub fn try_reserve(&mut self, bytes: u64) -> bool {
        if !self.fits(bytes) {
            return false;
        }
        self.used += bytes;
        true
    }

    pub fn release(&mut self, bytes: u64) {
        debug_assert!(bytes <= self.used);
        self.used -= bytes.min(self.used);
    }
}
