use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use sonotrap_core::field::{calibrated_source_amplitude, standard_rig, Axis, FieldModel, FieldSlice, PlaneSpec};
use sonotrap_core::medium::MediumState;
use sonotrap_core::phase::{compute_frame, FocalCommand, QuantizationConfig};
use sonotrap_core::Vec3;
use sonotrap_service::server::{start, ServerConfig, ServerHandle};
use sonotrap_service::session::SessionState;

fn serve(particle: bool) -> ServerHandle {
    let medium = MediumState::reference();
    let session = if particle {
        SessionState::standard(medium).unwrap()
    } else {
        SessionState::new(standard_rig(&medium).unwrap(), medium).unwrap()
    };
    start(session, "127.0.0.1:0", ServerConfig::default()).unwrap()
}

struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    seq: u64,
    last_event: Option<u64>,
}

impl Client {
    fn connect(addr: SocketAddr) -> Self {
        let stream = TcpStream::connect(addr).unwrap();
        stream.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
        Self {
            reader: BufReader::new(stream.try_clone().unwrap()),
            writer: stream,
            seq: 0,
            last_event: None,
        }
    }

    fn send_raw(&mut self, line: &str) {
        writeln!(self.writer, "{line}").unwrap();
    }

    fn send(&mut self, verb: &str, payload: Value) -> u64 {
        self.seq += 1;
        let request = json!({ "v": 1, "seq": self.seq, "verb": verb, "payload": payload });
        self.send_raw(&request.to_string());
        self.seq
    }

    /// Next event; checks the per-connection sequence as it goes.
    fn event(&mut self) -> Value {
        let mut line = String::new();
        self.reader.read_line(&mut line).unwrap();
        let event: Value = serde_json::from_str(&line).unwrap_or_else(|e| panic!("{e}: {line:?}"));
        assert_eq!(event["v"], 1);
        let seq = event["seq"].as_u64().unwrap();
        if let Some(last) = self.last_event {
            assert_eq!(seq, last + 1, "events out of order");
        }
        self.last_event = Some(seq);
        event
    }

    /// Reply to request `seq`, skipping telemetry.
    fn reply(&mut self, seq: u64) -> Value {
        loop {
            let e = self.event();
            if matches!(e["kind"].as_str(), Some("ack" | "error")) && e["payload"]["request_seq"] == seq {
                return e;
            }
        }
    }

    fn call(&mut self, verb: &str, payload: Value) -> Value {
        let seq = self.send(verb, payload);
        self.reply(seq)
    }

    fn telemetry(&mut self) -> Value {
        loop {
            let e = self.event();
            if e["kind"] == "telemetry" {
                return e;
            }
        }
    }
}

fn vec3(v: &Value) -> Vec3 {
    Vec3::new(v[0].as_f64().unwrap(), v[1].as_f64().unwrap(), v[2].as_f64().unwrap())
}

#[test]
fn move_focus_round_trip() {
    let server = serve(false);
    let mut c = Client::connect(server.local_addr());
    let ack = c.call("MoveFocus", json!({ "target": [0.0, 0.0, 100.0] }));
    assert_eq!(ack["kind"], "ack");
    let result = &ack["payload"]["result"];
    let delays = result["delays_cycles"].as_array().unwrap();
    assert_eq!(delays.len(), 64);
    assert!(delays.iter().all(|d| d.as_u64().unwrap() < 2500));
    assert!(result["latency_us"].as_f64().unwrap() >= 0.0);

    let err = c.call("MoveFocus", json!({ "target": [0.0, 0.0, -10.0] }));
    assert_eq!(err["kind"], "error");
    assert_eq!(err["payload"]["code"], "out_of_volume");
    assert!(err["payload"]["message"].as_str().unwrap().contains("z∈"));
    assert_eq!(server.with_session(|s| s.command().target), Vec3::new(0.0, 0.0, 100.0));

    c.send("MoveFocus", json!({ "target": [10.0, 0.0, 90.0] }));
    let last = c.send("MoveFocus", json!({ "target": [-10.0, 5.0, 95.0] }));
    c.reply(last);
    let expected = {
        let layout = server.with_session(|s| s.layout().clone());
        let quant = QuantizationConfig::for_layout(&layout).unwrap();
        let target = Vec3::new(-10.0, 5.0, 95.0);
        compute_frame(&layout, &FocalCommand::focus(target), &MediumState::reference(), &quant).unwrap()
    };
    assert_eq!(server.with_session(|s| s.current_frame().clone()), expected);
}

#[test]
fn malformed_and_out_of_order_requests_get_errors() {
    let server = serve(false);
    let mut c = Client::connect(server.local_addr());
    c.send_raw("not json");
    let e = c.event();
    assert_eq!((e["kind"].as_str(), e["payload"]["code"].as_str()), (Some("error"), Some("parse")));

    c.send_raw(r#"{"v":2,"seq":1,"verb":"Stop"}"#);
    assert_eq!(c.event()["payload"]["code"], "version_mismatch");

    c.send_raw(r#"{"v":1,"seq":5,"verb":"Stop"}"#);
    assert_eq!(c.event()["kind"], "ack");
    c.send_raw(r#"{"v":1,"seq":5,"verb":"QueryParticle"}"#);
    let e = c.event();
    assert_eq!(e["payload"]["code"], "sequence");
    assert_eq!(e["payload"]["request_seq"], 5);

    c.seq = 5;
    let e = c.call("Subscribe", json!({ "rate": 61.0 }));
    assert_eq!(e["kind"], "error");
    let e = c.call("Teleport", json!({}));
    assert_eq!(e["kind"], "error");
}

#[test]
fn ten_hertz_for_one_second() {
    let server = serve(true);
    let mut c = Client::connect(server.local_addr());
    let seq = c.send("Subscribe", json!({ "rate": 10.0, "particle": true }));
    c.reply(seq);
    let begin = Instant::now();
    std::thread::sleep(Duration::from_millis(1000));
    let stop = c.send("Unsubscribe", Value::Null);
    let mut telemetry = Vec::new();
    loop {
        let e = c.event();
        if e["kind"] == "telemetry" {
            telemetry.push(e);
        } else if e["payload"]["request_seq"] == stop {
            break;
        }
    }
    let elapsed = begin.elapsed().as_secs_f64();
    let n = telemetry.len() as f64;
    assert!((n - 10.0 * elapsed).abs() <= 1.0 + 1e-9, "{n} events in {elapsed} s");
    for t in &telemetry {
        let p = &t["payload"];
        assert!(p["particle"]["position"].is_array(), "{p}");
        assert_eq!(vec3(&p["focus"]), Vec3::new(0.0, 0.0, 100.0));
    }
    let times: Vec<f64> = telemetry.iter().map(|t| t["payload"]["sim_time"].as_f64().unwrap()).collect();
    assert!(times.windows(2).all(|w| w[1] >= w[0]));
    assert!(times.last().unwrap() > &0.2, "simulation stalled: {times:?}");
}

#[test]
fn slice_telemetry_matches_direct_evaluation() {
    let server = serve(false);
    let mut c = Client::connect(server.local_addr());
    let plane = PlaneSpec::through(&Vec3::new(0.0, 0.0, 90.0), Axis::Y, 16.0, 1.0);
    c.call("MoveFocus", json!({ "target": [4.0, 0.0, 90.0] }));
    c.call("Subscribe", json!({ "rate": 5.0, "particle": false, "field_slice": plane }));

    let layout = server.with_session(|s| s.layout().clone());
    let medium = MediumState::reference();
    let quant = QuantizationConfig::for_layout(&layout).unwrap();
    let frame = compute_frame(&layout, &FocalCommand::focus(Vec3::new(4.0, 0.0, 90.0)), &medium, &quant).unwrap();
    let model = FieldModel::new(&layout, &frame, &medium, calibrated_source_amplitude()).unwrap();
    let direct: Vec<f64> = FieldSlice::compute(&model, plane).unwrap().values.iter().map(|p| p.norm()).collect();

    for _ in 0..2 {
        let t = c.telemetry();
        let slice = &t["payload"]["slice"];
        assert_eq!(slice["size"], 33);
        assert!(t["payload"]["particle"].is_null());
        let grid: Vec<f64> = slice["abs_p"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert_eq!(grid, direct);
    }

    let big = PlaneSpec::through(&Vec3::new(0.0, 0.0, 90.0), Axis::Z, 60.0, 0.2);
    let ack = c.call("QueryField", json!({ "plane": big }));
    let size = ack["payload"]["result"]["size"].as_u64().unwrap();
    assert!(size <= 64);
    assert_eq!(ack["payload"]["result"]["abs_p"].as_array().unwrap().len() as u64, size * size);
}

#[test]
fn disconnect_keeps_session_and_resubscribe_resumes() {
    let server = serve(false);
    {
        let mut c = Client::connect(server.local_addr());
        c.call("Subscribe", json!({ "rate": 20.0 }));
        c.call("MoveFocus", json!({ "target": [12.0, -3.0, 88.0] }));
        c.telemetry();
    }
    std::thread::sleep(Duration::from_millis(100));
    let mut c = Client::connect(server.local_addr());
    c.call("Subscribe", json!({ "rate": 20.0 }));
    let t = c.telemetry();
    assert_eq!(vec3(&t["payload"]["focus"]), Vec3::new(12.0, -3.0, 88.0));
    assert!(t["payload"]["history_events"].as_u64().unwrap() >= 1);
}

#[test]
fn focus_change_visible_within_two_periods() {
    let server = serve(true);
    let mut c = Client::connect(server.local_addr());
    c.call("Subscribe", json!({ "rate": 20.0 }));
    c.telemetry();
    let seq = c.send("MoveFocus", json!({ "target": [1.0, 1.0, 100.0] }));
    let mut seen_ack = false;
    let mut periods_after_ack = 0;
    loop {
        let e = c.event();
        if e["kind"] == "ack" && e["payload"]["request_seq"] == seq {
            seen_ack = true;
        } else if e["kind"] == "telemetry" {
            let focus = vec3(&e["payload"]["focus"]);
            if focus == Vec3::new(1.0, 1.0, 100.0) {
                break;
            }
            if seen_ack {
                periods_after_ack += 1;
                assert!(periods_after_ack < 2, "stale focus {focus:?}");
            }
        }
    }
}

#[test]
fn temperature_and_trajectory_commands() {
    let server = serve(false);
    let mut c = Client::connect(server.local_addr());
    let ack = c.call("SetTemperature", json!({ "temperature_c": 30.0 }));
    assert_eq!(ack["payload"]["result"]["temperature"], 30.0);
    let frame = server.with_session(|s| s.current_frame().clone());
    assert_eq!(frame.medium_snapshot.temperature(), 30.0);
    assert_eq!(c.call("SetTemperature", json!({ "temperature_c": 99.0 }))["payload"]["code"], "sensor_range");

    let spec = json!({
        "shape": { "circular": { "radius": 20.0 } },
        "speed": 385.0,
        "step_size": 0.026,
        "height": 100.0
    });
    let ack = c.call("StartTrajectory", json!({ "spec": spec, "refresh_rate": 385.0 / 0.026 }));
    assert_eq!(ack["kind"], "ack", "{ack}");
    c.call("Subscribe", json!({ "rate": 20.0 }));
    let t = c.telemetry();
    assert!(t["payload"]["trajectory"]["waypoints"].as_u64().unwrap() > 4000);
    let ack = c.call("Stop", Value::Null);
    let held = vec3(&ack["payload"]["result"]["stopped_at"]);
    assert!(((held.x.powi(2) + held.y.powi(2)).sqrt() - 20.0).abs() < 1e-9);
    for _ in 0..2 {
        let t = c.telemetry();
        assert_eq!(vec3(&t["payload"]["focus"]), held);
        assert!(t["payload"]["trajectory"].is_null());
    }

    let too_fast = json!({ "shape": { "linear": { "path_length": 30.0 } }, "speed": 60000.0, "step_size": 10.0, "height": 100.0 });
    let err = c.call("StartTrajectory", json!({ "spec": too_fast, "refresh_rate": 6000.0 }));
    assert_eq!(err["payload"]["code"], "unstable_plan");

    let placed = c.call("PlaceParticle", json!({}));
    assert_eq!(placed["kind"], "ack", "{placed}");
    let particle = c.call("QueryParticle", Value::Null);
    assert!(particle["payload"]["result"]["particle"]["position"].is_array());
}

fn http_get(addr: SocketAddr, path: &str) -> (String, Value) {
    let mut stream = TcpStream::connect(addr).unwrap();
    write!(stream, "GET {path} HTTP/1.1\r\nHost: test\r\n\r\n").unwrap();
    let mut text = String::new();
    stream.read_to_string(&mut text).unwrap();
    let (head, body) = text.split_once("\r\n\r\n").unwrap();
    let status = head.lines().next().unwrap().to_string();
    (status, serde_json::from_str(body).unwrap())
}

#[test]
fn http_snapshots() {
    let server = serve(false);
    let addr = server.local_addr();
    let (status, state) = http_get(addr, "/state");
    assert!(status.contains("200"), "{status}");
    assert_eq!(vec3(&state["focus"]), Vec3::new(0.0, 0.0, 100.0));
    let (_, frame) = http_get(addr, "/frame");
    assert_eq!(frame["delays_cycles"].as_array().unwrap().len(), 64);
    let (_, session) = http_get(addr, "/session");
    assert_eq!(session["version"], 1);
    let (_, slice) = http_get(addr, "/field?normal=z&half_extent=10&pitch=1");
    assert_eq!(slice["size"], 21);
    assert_eq!(slice["plane"]["normal"], "Z");
    let (status, _) = http_get(addr, "/field?pitch=abc");
    assert!(status.contains("400"));
    let (status, _) = http_get(addr, "/nothing");
    assert!(status.contains("404"));
}

#[test]
fn autosave_writes_session_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("live.json");
    let medium = MediumState::reference();
    let session = SessionState::new(standard_rig(&medium).unwrap(), medium).unwrap();
    let config = ServerConfig {
        autosave: Some(path.clone()),
        ..ServerConfig::default()
    };
    let server = start(session, "127.0.0.1:0", config).unwrap();
    let mut c = Client::connect(server.local_addr());
    c.call("MoveFocus", json!({ "target": [7.0, 7.0, 77.0] }));
    let saved = sonotrap_service::session::load_session(&path).unwrap();
    assert_eq!(saved.command().target, Vec3::new(7.0, 7.0, 77.0));
    server.shutdown();
}
