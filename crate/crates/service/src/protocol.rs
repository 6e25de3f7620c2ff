//! Newline-delimited JSON protocol, schema version 1.
//!
//! Requests: `{"v":1,"seq":N,"verb":"MoveFocus","payload":{...}}`.
//! Responses and events: `{"v":1,"seq":N,"kind":"ack","payload":{...},"ts":t}`
//! where `seq` counts events on the connection and `ts` is seconds since the
//! server started.

use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sonotrap_core::field::PlaneSpec;
use sonotrap_core::trajectory::TrajectorySpec;
use sonotrap_core::Vec3;

pub const PROTOCOL_VERSION: u32 = 1;
/// Fastest telemetry subscription, Hz.
pub const MAX_RATE: f64 = 60.0;
/// Telemetry events queued per connection before the oldest is dropped.
pub const TELEMETRY_BACKLOG: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub v: u32,
    pub seq: u64,
    #[serde(flatten)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verb", content = "payload")]
pub enum Command {
    MoveFocus {
        target: Vec3,
    },
    SetTemperature {
        temperature_c: f64,
    },
    StartTrajectory {
        spec: TrajectorySpec,
        #[serde(default)]
        refresh_rate: Option<f64>,
    },
    Stop,
    QueryField {
        plane: PlaneSpec,
    },
    QueryParticle,
    /// Rests a fresh particle in the current trap.
    PlaceParticle {
        #[serde(default)]
        radius: Option<f64>,
        #[serde(default)]
        density: Option<f64>,
    },
    Subscribe(Subscription),
    Unsubscribe,
}

impl Command {
    pub fn verb(&self) -> &'static str {
        match self {
            Command::MoveFocus { .. } => "MoveFocus",
            Command::SetTemperature { .. } => "SetTemperature",
            Command::StartTrajectory { .. } => "StartTrajectory",
            Command::Stop => "Stop",
            Command::QueryField { .. } => "QueryField",
            Command::QueryParticle => "QueryParticle",
            Command::PlaceParticle { .. } => "PlaceParticle",
            Command::Subscribe(_) => "Subscribe",
            Command::Unsubscribe => "Unsubscribe",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Subscription {
    /// Hz, at most [`MAX_RATE`].
    pub rate: f64,
    #[serde(default = "yes")]
    pub particle: bool,
    #[serde(default)]
    pub field_slice: Option<PlaneSpec>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Ack,
    Error,
    Telemetry,
    Gap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub v: u32,
    pub seq: u64,
    pub kind: EventKind,
    pub payload: Value,
    pub ts: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AckPayload {
    pub request_seq: u64,
    pub verb: String,
    pub result: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub request_seq: Option<u64>,
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapPayload {
    pub dropped: u64,
}

#[derive(Debug)]
struct Queued {
    kind: EventKind,
    payload: Value,
    ts: f64,
}

#[derive(Debug, Default)]
struct OutboxState {
    queue: VecDeque<Queued>,
    telemetry: usize,
    dropped: u64,
    next_seq: u64,
    closed: bool,
}

/// Per-connection event queue. Replies are never dropped; when telemetry
/// backs up the oldest telemetry event goes, and a gap event reporting how
/// many were lost precedes the next telemetry event sent.
#[derive(Debug)]
pub struct Outbox {
    state: Mutex<OutboxState>,
    ready: Condvar,
    epoch: Instant,
    backlog: usize,
}

impl Outbox {
    pub fn new(epoch: Instant) -> Self {
        Self::with_backlog(epoch, TELEMETRY_BACKLOG)
    }

    pub fn with_backlog(epoch: Instant, backlog: usize) -> Self {
        Self {
            state: Mutex::new(OutboxState::default()),
            ready: Condvar::new(),
            epoch,
            backlog: backlog.max(1),
        }
    }

    fn push(&self, kind: EventKind, payload: Value) {
        let ts = self.epoch.elapsed().as_secs_f64();
        let mut s = self.state.lock().expect("outbox lock");
        if s.closed {
            return;
        }
        if kind == EventKind::Telemetry {
            if s.telemetry == self.backlog {
                let oldest = s
                    .queue
                    .iter()
                    .position(|q| q.kind == EventKind::Telemetry)
                    .expect("backlog holds telemetry");
                s.queue.remove(oldest);
                s.telemetry -= 1;
                s.dropped += 1;
            }
            s.telemetry += 1;
        }
        s.queue.push_back(Queued { kind, payload, ts });
        self.ready.notify_one();
    }

    pub fn ack(&self, request_seq: u64, verb: &str, result: Value) {
        let payload = AckPayload {
            request_seq,
            verb: verb.into(),
            result,
        };
        self.push(EventKind::Ack, serde_json::to_value(payload).expect("ack serializes"));
    }

    pub fn error(&self, request_seq: Option<u64>, code: &str, message: String) {
        let payload = ErrorPayload {
            request_seq,
            code: code.into(),
            message,
        };
        self.push(EventKind::Error, serde_json::to_value(payload).expect("error serializes"));
    }

    pub fn telemetry(&self, payload: Value) {
        self.push(EventKind::Telemetry, payload);
    }

    /// Next event to send, numbered; blocks until one is queued. `None` once
    /// closed and drained.
    pub fn next(&self) -> Option<Event> {
        let mut s = self.state.lock().expect("outbox lock");
        loop {
            if let Some(front) = s.queue.front() {
                let (front_kind, front_ts) = (front.kind, front.ts);
                let (kind, payload, ts) = if front_kind == EventKind::Telemetry && s.dropped > 0 {
                    let gap = GapPayload { dropped: s.dropped };
                    s.dropped = 0;
                    (EventKind::Gap, serde_json::to_value(gap).expect("gap serializes"), front_ts)
                } else {
                    let q = s.queue.pop_front().expect("front exists");
                    if q.kind == EventKind::Telemetry {
                        s.telemetry -= 1;
                    }
                    (q.kind, q.payload, q.ts)
                };
                let seq = s.next_seq;
                s.next_seq += 1;
                return Some(Event {
                    v: PROTOCOL_VERSION,
                    seq,
                    kind,
                    payload,
                    ts,
                });
            }
            if s.closed {
                return None;
            }
            s = self.ready.wait(s).expect("outbox lock");
        }
    }

    /// Stops accepting events; queued ones are still delivered.
    pub fn close(&self) {
        self.state.lock().expect("outbox lock").closed = true;
        self.ready.notify_all();
    }

    /// Closes and discards anything not yet sent.
    pub fn abort(&self) {
        let mut s = self.state.lock().expect("outbox lock");
        s.closed = true;
        s.queue.clear();
        s.telemetry = 0;
        self.ready.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.state.lock().expect("outbox lock").closed
    }
}
