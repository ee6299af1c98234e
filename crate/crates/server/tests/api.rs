use std::io::{BufRead, BufReader};
use std::net::SocketAddr;
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde_json::{json, Value};
use tandem_core::llm::{ChatBackend, CompletionRequest, LlmError, ScriptedBackend};
use tandem_core::session::JournalEvent;
use tandem_core::synth;
use tandem_server::{serve, BackendFactory, Service, ServiceConfig};

fn start(config: ServiceConfig, factory: BackendFactory) -> (SocketAddr, Service) {
    let service = Service::new(config, factory).unwrap();
    let (tx, rx) = mpsc::channel();
    let svc = service.clone();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
        rt.block_on(serve("127.0.0.1:0".parse().unwrap(), svc, move |a| tx.send(a).unwrap())).unwrap();
    });
    (rx.recv_timeout(Duration::from_secs(10)).unwrap(), service)
}

fn scripted_binary() -> BackendFactory {
    Arc::new(|| Ok(Box::new(ScriptedBackend::new(synth::binary_fixture())) as Box<dyn ChatBackend>))
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

fn post(addr: SocketAddr, path: &str, body: &[u8]) -> (u16, Value) {
    let mut resp = agent().post(&format!("http://{addr}{path}")).send(body).unwrap();
    let status = resp.status().as_u16();
    let text = resp.body_mut().read_to_string().unwrap();
    (status, serde_json::from_str(&text).unwrap_or(Value::String(text)))
}

fn get(addr: SocketAddr, path: &str) -> (u16, Vec<u8>) {
    let mut resp = agent().get(&format!("http://{addr}{path}")).call().unwrap();
    let status = resp.status().as_u16();
    (status, resp.body_mut().read_to_vec().unwrap())
}

/// Reads SSE events until `stop` says so or the timeout elapses.
fn read_sse(addr: SocketAddr, path: &str, stop: impl Fn(&JournalEvent) -> bool + Send + 'static) -> Vec<(String, JournalEvent)> {
    let (tx, rx) = mpsc::channel();
    let url = format!("http://{addr}{path}");
    std::thread::spawn(move || {
        let resp = agent().get(&url).call().unwrap();
        let reader = BufReader::new(resp.into_body().into_reader());
        let mut name = String::new();
        for line in reader.lines() {
            let Ok(line) = line else { break };
            if let Some(n) = line.strip_prefix("event: ") {
                name = n.to_string();
            } else if let Some(d) = line.strip_prefix("data: ") {
                let e: JournalEvent = serde_json::from_str(d).unwrap();
                let done = stop(&e);
                if tx.send((name.clone(), e)).is_err() || done {
                    break;
                }
            }
        }
    });
    let mut out = Vec::new();
    while let Ok(item) = rx.recv_timeout(Duration::from_secs(60)) {
        out.push(item);
    }
    out
}

fn create(addr: SocketAddr) -> String {
    let (status, body) = post(addr, "/v1/sessions", b"");
    assert_eq!(status, 201, "{body}");
    body["session_id"].as_str().unwrap().to_string()
}

#[test]
fn create_and_error_codes() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = ServiceConfig::new(dir.path());
    config.max_sessions = 2;
    let (addr, svc) = start(config, scripted_binary());
    let a = create(addr);
    let b = create(addr);
    assert_ne!(a, b);
    assert_eq!(a.len(), 32);
    assert_eq!(svc.events_from(&a, 1).unwrap().len(), 1);

    let (status, body) = post(addr, "/v1/sessions", b"");
    assert_eq!((status, body["code"].as_str()), (429, Some("E_CAPACITY")));

    let (status, body) = post(addr, "/v1/sessions/nope/instructions", br#"{"text":"hi"}"#);
    assert_eq!((status, body["code"].as_str()), (404, Some("E_SESSION_NOT_FOUND")));
    assert_eq!(get(addr, "/v1/sessions/nope/report").0, 404);
    assert_eq!(get(addr, "/v1/sessions/nope/events").0, 404);

    let (status, body) = post(addr, &format!("/v1/sessions/{a}/dataset?role=valid"), b"x\n1\n");
    assert_eq!((status, body["code"].as_str()), (400, Some("E_BAD_ROLE")));
    let (status, body) = post(addr, &format!("/v1/sessions/{a}/dataset?role=train"), b"a,b\n1,2\n3\n");
    assert_eq!(status, 400);
    assert!(body["message"].as_str().unwrap().contains("line 3"), "{body}");
    let (status, body) = post(addr, &format!("/v1/sessions/{a}/instructions"), br#"{"txt":1}"#);
    assert_eq!((status, body["code"].as_str()), (400, Some("E_BAD_REQUEST")));

    let (status, report) = get(addr, &format!("/v1/sessions/{a}/report"));
    let report: Value = serde_json::from_slice(&report).unwrap();
    assert_eq!((status, report["status"].as_str(), report["stage"].as_str()), (200, Some("in_progress"), Some("Init")));
    let (status, body) = get(addr, &format!("/v1/sessions/{a}/artifacts/..%2Fjournal.jsonl"));
    assert_eq!(status, 404, "{}", String::from_utf8_lossy(&body));
}

#[test]
fn upload_limit() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = ServiceConfig::new(dir.path());
    config.max_upload_bytes = 16;
    let (addr, _svc) = start(config, scripted_binary());
    let id = create(addr);
    let (status, body) = post(addr, &format!("/v1/sessions/{id}/dataset?role=train"), b"a,b\n1,2\n3,4\n5,6\n7,8\n");
    assert_eq!((status, body["code"].as_str()), (400, Some("E_TOO_LARGE")));
}

#[test]
fn full_flow_streams_and_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (addr, _svc) = start(ServiceConfig::new(dir.path()), scripted_binary());
    let id = create(addr);
    let d = synth::binary(synth::BINARY_SEED);
    let (status, summary) = post(addr, &format!("/v1/sessions/{id}/dataset?role=train"), d.train_csv.as_bytes());
    assert_eq!(status, 200, "{summary}");
    assert!(summary["digest"].as_str().unwrap().contains("400 rows"));
    assert_eq!(post(addr, &format!("/v1/sessions/{id}/dataset?role=test"), d.test_csv.as_bytes()).0, 200);

    for (i, text) in tandem_core::agents::CANONICAL_INSTRUCTIONS.iter().enumerate() {
        let (status, body) = post(addr, &format!("/v1/sessions/{id}/instructions"), json!({"text": text}).to_string().as_bytes());
        assert_eq!((status, body["seq"].as_u64()), (202, Some(i as u64 + 1)));
    }

    let stop = |e: &JournalEvent| e.kind.as_str() == "finalized";
    let first = read_sse(addr, &format!("/v1/sessions/{id}/events?from=1"), stop);
    let second = read_sse(addr, &format!("/v1/sessions/{id}/events"), stop);
    let seqs: Vec<u64> = first.iter().map(|e| e.1.seq).collect();
    assert_eq!(seqs, (1..=seqs.len() as u64).collect::<Vec<_>>());
    assert_eq!(first, second);
    for (name, e) in &first {
        assert_eq!(name, e.kind.as_str());
    }
    let instr: Vec<usize> = first.iter().enumerate().filter(|(_, e)| e.1.kind.as_str() == "user_instruction").map(|p| p.0).collect();
    let replies: Vec<usize> = first.iter().enumerate().filter(|(_, e)| e.1.kind.as_str() == "user_reply").map(|p| p.0).collect();
    assert_eq!(instr.len(), 4);
    for k in 0..4 {
        assert!(instr[k] < replies[k] && (k == 3 || replies[k] < instr[k + 1]));
    }

    let mid = seqs.len() as u64 / 2;
    let resumed = read_sse(addr, &format!("/v1/sessions/{id}/events?from={mid}"), stop);
    assert_eq!(resumed.iter().map(|e| e.1.clone()).collect::<Vec<_>>(), first[mid as usize - 1..].iter().map(|e| e.1.clone()).collect::<Vec<_>>());

    let report = loop {
        let (_, report) = get(addr, &format!("/v1/sessions/{id}/report"));
        let report: Value = serde_json::from_slice(&report).unwrap();
        if report["status"] == "finalized" {
            break report;
        }
        std::thread::sleep(Duration::from_millis(10));
    };
    assert_eq!(report["report"]["model"], "m_tuned");
    let (status, bytes) = get(addr, &format!("/v1/sessions/{id}/artifacts/submission.csv"));
    assert_eq!(status, 200);
    assert_eq!(bytes, std::fs::read(dir.path().join(&id).join("artifacts/submission.csv")).unwrap());
    assert_eq!(String::from_utf8(bytes).unwrap().lines().count(), 101);

    // A fresh service over the same directory replays to the same report.
    let (addr2, _svc2) = start(ServiceConfig::new(dir.path()), scripted_binary());
    let (_, again) = get(addr2, &format!("/v1/sessions/{id}/report"));
    assert_eq!(serde_json::from_slice::<Value>(&again).unwrap(), report);
}

/// Blocks every completion until released.
struct Gate(Arc<Mutex<()>>);

impl ChatBackend for Gate {
    fn complete(&self, _request: &CompletionRequest) -> Result<String, LlmError> {
        let _held = self.0.lock().unwrap();
        Ok("Final Answer: done".into())
    }
}

#[test]
fn queue_bound_and_order() {
    let dir = tempfile::tempdir().unwrap();
    let gate = Arc::new(Mutex::new(()));
    let g = gate.clone();
    let factory: BackendFactory = Arc::new(move || Ok(Box::new(Gate(g.clone())) as Box<dyn ChatBackend>));
    let (addr, svc) = start(ServiceConfig::new(dir.path()), factory);
    let id = create(addr);
    let d = synth::binary(1);
    post(addr, &format!("/v1/sessions/{id}/dataset?role=train"), d.train_csv.as_bytes());

    let lock = gate.lock().unwrap();
    let body = json!({"text": "Explore the dataset"}).to_string();
    let (status, _) = post(addr, &format!("/v1/sessions/{id}/instructions"), body.as_bytes());
    assert_eq!(status, 202);
    // Wait until the worker has taken the first instruction off the queue.
    let deadline = std::time::Instant::now() + Duration::from_secs(10);
    while !svc.events_from(&id, 1).unwrap().iter().any(|e| e.kind.as_str() == "user_instruction") {
        assert!(std::time::Instant::now() < deadline);
        std::thread::sleep(Duration::from_millis(5));
    }
    for _ in 0..16 {
        assert_eq!(post(addr, &format!("/v1/sessions/{id}/instructions"), body.as_bytes()).0, 202);
    }
    let (status, err) = post(addr, &format!("/v1/sessions/{id}/instructions"), body.as_bytes());
    assert_eq!((status, err["code"].as_str()), (429, Some("E_QUEUE_FULL")));
    drop(lock);

    let deadline = std::time::Instant::now() + Duration::from_secs(30);
    loop {
        let evs = svc.events_from(&id, 1).unwrap();
        if evs.iter().filter(|e| e.kind.as_str() == "user_reply").count() == 17 {
            let kinds: Vec<&str> = evs.iter().map(|e| e.kind.as_str()).filter(|k| *k == "user_instruction" || *k == "user_reply").collect();
            assert!(kinds.chunks(2).all(|c| c == ["user_instruction", "user_reply"]));
            break;
        }
        assert!(std::time::Instant::now() < deadline);
        std::thread::sleep(Duration::from_millis(10));
    }
}
