//! TCP server. One port carries both the JSON-lines protocol and plain
//! HTTP GET snapshots, told apart by the first line a client sends.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use serde_json::{json, Value};
use sonotrap_core::field::{Axis, ParticleState, PlaneSpec};
use sonotrap_core::field::gorkov::{EPS_DENSITY, EPS_RADIUS};
use sonotrap_core::medium::FileSource;

use crate::error::{Result, ServiceError};
use crate::protocol::{Command, Outbox, Request, Subscription, MAX_RATE, PROTOCOL_VERSION};
use crate::session::{persist_session, SessionState};

const TICK: Duration = Duration::from_millis(5);
/// Frames simulated per lock acquisition.
const FRAMES_PER_CHUNK: usize = 20;
/// Simulated time allowed to pile up before the simulation gives up on
/// catching up with the wall clock.
const MAX_BACKLOG: f64 = 0.05;
const TEMPERATURE_POLL: Duration = Duration::from_secs(1);

#[derive(Debug, Clone, Default)]
pub struct ServerConfig {
    /// Session file rewritten after every state change.
    pub autosave: Option<PathBuf>,
    /// File polled for the air temperature.
    pub temperature_file: Option<PathBuf>,
}

struct Shared {
    session: Mutex<SessionState>,
    epoch: Instant,
    shutdown: AtomicBool,
    config: ServerConfig,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, SessionState> {
        self.session.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn autosave(&self) {
        if let Some(path) = &self.config.autosave {
            let file = self.lock().to_file();
            if let Err(e) = crate::session::write_session_file(&file, path) {
                warn!("autosave to {} failed: {e}", path.display());
            }
        }
    }
}

pub struct ServerHandle {
    shared: Arc<Shared>,
    addr: SocketAddr,
    threads: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Runs `f` on the live session under its lock.
    pub fn with_session<T>(&self, f: impl FnOnce(&mut SessionState) -> T) -> T {
        f(&mut self.shared.lock())
    }

    /// Blocks until the server stops.
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if !self.threads.is_empty() {
            self.stop();
        }
    }
}

/// Binds `addr` and serves `session` from background threads.
pub fn start(session: SessionState, addr: impl ToSocketAddrs, config: ServerConfig) -> io::Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    let addr = listener.local_addr()?;
    let shared = Arc::new(Shared {
        session: Mutex::new(session),
        epoch: Instant::now(),
        shutdown: AtomicBool::new(false),
        config,
    });
    let sim = {
        let shared = shared.clone();
        thread::Builder::new()
            .name("simulation".into())
            .spawn(move || simulate(&shared))?
    };
    let accept = {
        let shared = shared.clone();
        thread::Builder::new()
            .name("accept".into())
            .spawn(move || accept_loop(&shared, listener))?
    };
    info!("listening on {addr}");
    Ok(ServerHandle {
        shared,
        addr,
        threads: vec![sim, accept],
    })
}

fn accept_loop(shared: &Arc<Shared>, listener: TcpListener) {
    for stream in listener.incoming() {
        if shared.shutdown.load(Ordering::SeqCst) {
            break;
        }
        match stream {
            Ok(stream) => {
                let shared = shared.clone();
                thread::spawn(move || {
                    let peer = stream.peer_addr().ok();
                    if let Err(e) = serve_connection(&shared, stream) {
                        debug!("connection {peer:?} ended: {e}");
                    }
                });
            }
            Err(e) => warn!("accept failed: {e}"),
        }
    }
}

/// Keeps simulated time in step with the wall clock.
fn simulate(shared: &Shared) {
    let mut last = Instant::now();
    let mut owed = 0.0;
    let mut sensor = shared
        .config
        .temperature_file
        .clone()
        .map(|path| (FileSource { path }, Instant::now() - TEMPERATURE_POLL));
    while !shared.shutdown.load(Ordering::SeqCst) {
        thread::sleep(TICK);
        let now = Instant::now();
        owed = (owed + (now - last).as_secs_f64()).min(MAX_BACKLOG);
        last = now;
        if let Some((source, polled)) = &mut sensor {
            if polled.elapsed() >= TEMPERATURE_POLL {
                *polled = Instant::now();
                if let Err(e) = shared.lock().refresh_temperature(source) {
                    warn!("temperature update skipped: {e}");
                }
            }
        }
        loop {
            let mut session = shared.lock();
            let latency = session.timing().latency;
            let due = (owed / latency).floor() as usize;
            if due == 0 {
                break;
            }
            let n = due.min(FRAMES_PER_CHUNK);
            if let Err(e) = session.advance(n) {
                warn!("simulation step failed: {e}");
            }
            owed -= n as f64 * latency;
            drop(session);
            if Instant::now() - now > TICK {
                break;
            }
        }
    }
}

fn serve_connection(shared: &Arc<Shared>, stream: TcpStream) -> io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut first = String::new();
    if reader.read_line(&mut first)? == 0 {
        return Ok(());
    }
    if first.starts_with("GET ") {
        return serve_http(shared, &first, reader, stream);
    }

    let outbox = Arc::new(Outbox::new(shared.epoch));
    let writer = {
        let outbox = outbox.clone();
        let mut out = io::BufWriter::new(stream.try_clone()?);
        thread::spawn(move || {
            while let Some(event) = outbox.next() {
                let line = serde_json::to_string(&event).expect("event serializes");
                if writeln!(out, "{line}").and_then(|_| out.flush()).is_err() {
                    outbox.abort();
                    break;
                }
            }
        })
    };
    let mut connection = Connection {
        shared: shared.clone(),
        outbox: outbox.clone(),
        last_seq: None,
        subscription: None,
    };
    let mut line = first;
    loop {
        if !line.trim().is_empty() {
            connection.handle_line(line.trim());
        }
        line.clear();
        if outbox.is_closed() || reader.read_line(&mut line).unwrap_or(0) == 0 {
            break;
        }
    }
    connection.unsubscribe();
    outbox.close();
    let _ = writer.join();
    let _ = stream.shutdown(Shutdown::Both);
    Ok(())
}

struct SubscriptionHandle {
    cancelled: Arc<AtomicBool>,
    thread: JoinHandle<()>,
}

struct Connection {
    shared: Arc<Shared>,
    outbox: Arc<Outbox>,
    last_seq: Option<u64>,
    subscription: Option<SubscriptionHandle>,
}

impl Connection {
    fn handle_line(&mut self, line: &str) {
        let request: Request = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                let seq = serde_json::from_str::<Value>(line)
                    .ok()
                    .and_then(|v| v.get("seq").and_then(Value::as_u64));
                self.outbox.error(seq, "parse", format!("bad request: {e}"));
                return;
            }
        };
        if request.v != PROTOCOL_VERSION {
            self.outbox.error(
                Some(request.seq),
                "version_mismatch",
                format!("protocol version {} unsupported, expected {PROTOCOL_VERSION}", request.v),
            );
            return;
        }
        if let Some(last) = self.last_seq {
            if request.seq <= last {
                self.outbox.error(
                    Some(request.seq),
                    "sequence",
                    format!("seq {} does not follow {last}", request.seq),
                );
                return;
            }
        }
        self.last_seq = Some(request.seq);
        let verb = request.command.verb();
        match self.execute(request.command) {
            Ok(result) => self.outbox.ack(request.seq, verb, result),
            Err(e) => self.outbox.error(Some(request.seq), e.code(), e.to_string()),
        }
    }

    fn execute(&mut self, command: Command) -> Result<Value> {
        let shared = self.shared.clone();
        let (result, changed) = match command {
            Command::MoveFocus { target } => (json!(shared.lock().move_focus(target)?), true),
            Command::SetTemperature { temperature_c } => {
                let mut s = shared.lock();
                s.set_temperature(temperature_c)?;
                (json!(s.telemetry(false)), true)
            }
            Command::StartTrajectory { spec, refresh_rate } => {
                (json!(shared.lock().start_trajectory(spec, refresh_rate)?), true)
            }
            Command::Stop => (json!({ "stopped_at": shared.lock().stop() }), true),
            Command::QueryField { plane } => {
                let snapshot = shared.lock().field_snapshot();
                (json!(snapshot.slice(plane)?), false)
            }
            Command::QueryParticle => (json!(shared.lock().telemetry(true)), false),
            Command::PlaceParticle { radius, density } => {
                let mut s = shared.lock();
                let particle = ParticleState::new(
                    s.command().target,
                    radius.unwrap_or(EPS_RADIUS),
                    density.unwrap_or(EPS_DENSITY),
                )?;
                (json!({ "position": s.place_particle(particle)? }), true)
            }
            Command::Subscribe(sub) => {
                self.subscribe(sub)?;
                (json!(sub), false)
            }
            Command::Unsubscribe => (json!({ "active": self.unsubscribe() }), false),
        };
        if changed {
            shared.autosave();
        }
        Ok(result)
    }

    /// Replaces any running subscription.
    fn subscribe(&mut self, sub: Subscription) -> Result<()> {
        if !(sub.rate > 0.0 && sub.rate <= MAX_RATE) {
            return Err(ServiceError::Invalid(format!(
                "rate {} Hz outside (0, {MAX_RATE}]",
                sub.rate
            )));
        }
        if let Some(plane) = sub.field_slice {
            crate::session::decimate(plane)?;
        }
        self.unsubscribe();
        let cancelled = Arc::new(AtomicBool::new(false));
        let thread = {
            let cancelled = cancelled.clone();
            let shared = self.shared.clone();
            let outbox = self.outbox.clone();
            thread::spawn(move || stream_telemetry(&shared, &outbox, sub, &cancelled))
        };
        self.subscription = Some(SubscriptionHandle { cancelled, thread });
        Ok(())
    }

    fn unsubscribe(&mut self) -> bool {
        match self.subscription.take() {
            Some(s) => {
                s.cancelled.store(true, Ordering::SeqCst);
                let _ = s.thread.join();
                true
            }
            None => false,
        }
    }
}

/// Emits one telemetry event per period, each taken from a single snapshot
/// of the session.
fn stream_telemetry(shared: &Shared, outbox: &Outbox, sub: Subscription, cancelled: &AtomicBool) {
    let period = Duration::from_secs_f64(1.0 / sub.rate);
    let mut deadline = Instant::now() + period;
    while !cancelled.load(Ordering::SeqCst) && !outbox.is_closed() && !shared.shutdown.load(Ordering::SeqCst) {
        let now = Instant::now();
        if now < deadline {
            thread::sleep((deadline - now).min(Duration::from_millis(20)));
            continue;
        }
        deadline += period;
        if deadline < now {
            deadline = now + period;
        }
        let (mut telemetry, snapshot) = {
            let s = shared.lock();
            (s.telemetry(sub.particle), sub.field_slice.map(|_| s.field_snapshot()))
        };
        if let (Some(plane), Some(snapshot)) = (sub.field_slice, snapshot) {
            match snapshot.slice(plane) {
                Ok(slice) => telemetry.slice = Some(slice),
                Err(e) => warn!("slice skipped: {e}"),
            }
        }
        outbox.telemetry(serde_json::to_value(&telemetry).expect("telemetry serializes"));
    }
}

fn serve_http(shared: &Shared, request_line: &str, mut reader: BufReader<TcpStream>, mut stream: TcpStream) -> io::Result<()> {
    let mut header = String::new();
    while reader.read_line(&mut header)? > 0 && !header.trim().is_empty() {
        header.clear();
    }
    let target = request_line.split_whitespace().nth(1).unwrap_or("/");
    let (path, query) = target.split_once('?').unwrap_or((target, ""));
    let (status, body) = match http_body(shared, path, query) {
        Ok(body) => ("200 OK", body),
        Err((status, message)) => (status, json!({ "error": message })),
    };
    let body = serde_json::to_string(&body).expect("body serializes");
    write!(
        stream,
        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )?;
    stream.flush()
}

fn http_body(shared: &Shared, path: &str, query: &str) -> std::result::Result<Value, (&'static str, String)> {
    let bad = |e: ServiceError| ("400 Bad Request", e.to_string());
    match path {
        "/state" => Ok(json!(shared.lock().telemetry(true))),
        "/frame" => Ok(json!(shared.lock().current_frame())),
        "/session" => Ok(json!(shared.lock().to_file())),
        "/field" => {
            let (snapshot, focus) = {
                let s = shared.lock();
                (s.field_snapshot(), s.command().target)
            };
            let plane = plane_from_query(query, &focus).map_err(bad)?;
            snapshot.slice(plane).map(|s| json!(s)).map_err(bad)
        }
        _ => Err(("404 Not Found", format!("no resource {path}"))),
    }
}

/// `normal=y&half_extent=30&pitch=1&offset=..&center_u=..&center_v=..`,
/// defaulting to the plane normal to y through the focus.
fn plane_from_query(query: &str, focus: &sonotrap_core::Vec3) -> Result<PlaneSpec> {
    let mut plane = PlaneSpec::through(focus, Axis::Y, 30.0, 1.0);
    let mut fields: Vec<(&str, &str)> = query.split('&').filter_map(|kv| kv.split_once('=')).collect();
    if let Some(i) = fields.iter().position(|(k, _)| *k == "normal") {
        let axis = match fields[i].1.to_ascii_lowercase().as_str() {
            "x" => Axis::X,
            "y" => Axis::Y,
            "z" => Axis::Z,
            other => return Err(ServiceError::Invalid(format!("unknown axis {other}"))),
        };
        plane = PlaneSpec::through(focus, axis, plane.half_extent, plane.pitch);
        fields.remove(i);
    }
    for (key, value) in fields {
        let v: f64 = value
            .parse()
            .map_err(|_| ServiceError::Invalid(format!("{key}={value} is not a number")))?;
        match key {
            "offset" => plane.offset = v,
            "center_u" => plane.center_u = v,
            "center_v" => plane.center_v = v,
            "half_extent" => plane.half_extent = v,
            "pitch" => plane.pitch = v,
            other => return Err(ServiceError::Invalid(format!("unknown parameter {other}"))),
        }
    }
    Ok(plane)
}

/// Writes the session to `path` now.
pub fn save(handle: &ServerHandle, path: &std::path::Path) -> Result<()> {
    handle.with_session(|s| persist_session(s, path))
}
