//! Runs the HTTP provider against a local mock completions server that
//! answers from a toy model.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};

use tempnorm_core::backends::{LogprobProvider, ToyProvider};
use tempnorm_core::eval::Statistic;
use tempnorm_core::experiment::{run_experiment, ExperimentConfig};
use tempnorm_core::{Error, Label, ScoreParams64, SequenceRecord, ToyLm64};
use tempnorm_http::{HttpConfig, HttpProvider};

#[derive(Default)]
struct ServerState {
    requests: AtomicUsize,
    /// Respond 503 to this many requests before answering.
    fail_first: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    delay_ms: AtomicUsize,
    auth: Mutex<Vec<Option<String>>>,
}

struct MockServer {
    url: String,
    state: Arc<ServerState>,
}

fn model() -> ToyLm64 {
    ToyLm64::random(6, 1, 1.5, 42).unwrap()
}

fn spawn(lm: ToyLm64) -> MockServer {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let state = Arc::new(ServerState::default());
    let lm = Arc::new(lm);
    let st = state.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let (st, lm) = (st.clone(), lm.clone());
            thread::spawn(move || handle(stream.unwrap(), &st, &lm));
        }
    });
    MockServer { url, state }
}

fn handle(mut stream: TcpStream, st: &ServerState, lm: &ToyLm64) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut headers = HashMap::new();
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    loop {
        line.clear();
        reader.read_line(&mut line).unwrap();
        let l = line.trim_end();
        if l.is_empty() {
            break;
        }
        if let Some((k, v)) = l.split_once(':') {
            headers.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
        }
    }
    let len: usize = headers.get("content-length").map_or(0, |v| v.parse().unwrap());
    let mut body = vec![0; len];
    reader.read_exact(&mut body).unwrap();
    st.requests.fetch_add(1, Ordering::SeqCst);
    st.auth.lock().unwrap().push(headers.get("authorization").cloned());
    let now = st.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    st.max_in_flight.fetch_max(now, Ordering::SeqCst);
    thread::sleep(Duration::from_millis(st.delay_ms.load(Ordering::SeqCst) as u64));
    let (status, text) = if st.fail_first.load(Ordering::SeqCst) > 0 {
        st.fail_first.fetch_sub(1, Ordering::SeqCst);
        ("503 Service Unavailable", "busy".to_string())
    } else {
        ("200 OK", respond(serde_json::from_slice(&body).unwrap(), lm).to_string())
    };
    st.in_flight.fetch_sub(1, Ordering::SeqCst);
    let reply = format!(
        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
        text.len()
    );
    stream.write_all(reply.as_bytes()).unwrap();
}

/// Echo-mode completion: logprob of every token and the top-n at each
/// position after the first.
fn respond(req: Value, lm: &ToyLm64) -> Value {
    assert_eq!(req["echo"], json!(true));
    assert_eq!(req["max_tokens"], json!(0));
    assert_eq!(req["return_tokens_as_token_ids"], json!(true));
    let n = req["logprobs"].as_u64().unwrap() as usize;
    let prompt: Vec<u32> = req["prompt"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap() as u32).collect();
    let mut tokens = Vec::new();
    let mut token_logprobs = vec![Value::Null];
    let mut top = vec![Value::Null];
    for (i, &t) in prompt.iter().enumerate() {
        tokens.push(json!(format!("token_id:{t}")));
        if i == 0 {
            continue;
        }
        let row = lm.cond_dist(&prompt[..i]).unwrap();
        token_logprobs.push(json!(row.log_prob(t)));
        let mut alts = serde_json::Map::new();
        for &v in row.ranking().iter().take(n) {
            alts.insert(format!("token_id:{v}"), json!(row.log_prob(v)));
        }
        top.push(Value::Object(alts));
    }
    json!({"choices": [{"text": "", "logprobs": {"tokens": tokens, "token_logprobs": token_logprobs, "top_logprobs": top}}]})
}

fn config(url: &str, top: usize) -> HttpConfig {
    serde_json::from_value(json!({
        "base_url": url,
        "model": "toy",
        "vocab_size": 6,
        "top_logprobs": top,
        "retry_backoff_ms": 5,
        "timeout_secs": 10,
    }))
    .unwrap()
}

fn record(id: &str, tokens: Vec<u32>, prompt_len: usize) -> SequenceRecord {
    let mut r = SequenceRecord::new(id, Label::Human, tokens);
    r.meta.insert("prompt_len".into(), prompt_len.into());
    r
}

#[test]
fn full_vocabulary_matches_toy_provider() {
    let server = spawn(model());
    let http = HttpProvider::new(config(&server.url, 6)).unwrap();
    assert!(http.capability().is_full());
    let toy = ToyProvider::new(model());
    let params = ScoreParams64::new(0.7, 2, 0.9).unwrap();
    let r = record("a", vec![1, 4, 2, 0, 5, 5, 3], 2);
    let a = LogprobProvider::<f64>::provide_record(&http, &r).unwrap().score(&params).unwrap();
    let b = LogprobProvider::<f64>::provide_record(&toy, &r).unwrap().score(&params).unwrap();
    assert_eq!(a, b);
}

#[test]
fn top_n_rows_are_truncated() {
    let server = spawn(model());
    let http = HttpProvider::new(config(&server.url, 2)).unwrap();
    assert!(!http.capability().is_full());
    let params = ScoreParams64::new(0.7, 2, 0.9).unwrap();
    let r = record("a", vec![1, 4, 2, 0, 5, 5, 3], 1);
    let scores = LogprobProvider::<f64>::provide_record(&http, &r).unwrap().score(&params).unwrap();
    let exact = LogprobProvider::<f64>::provide_record(&ToyProvider::new(model()), &r).unwrap().score(&params).unwrap();
    for (s, e) in scores.iter().zip(&exact) {
        assert_eq!(s.logprob, e.logprob);
        assert!(s.residual_mass > 0.0);
        assert!(s.log_tempnorm_step <= e.log_tempnorm_step + 1e-12);
        assert_eq!(s.rank_exact, e.rank <= 2);
    }
    let cfg = ExperimentConfig { statistics: vec![Statistic::Entropy], ..Default::default() };
    let mut m = record("m", vec![1, 4, 2, 0], 1);
    m.label = Label::Machine;
    let err = run_experiment::<f64>(&cfg, &[r, m], &http).unwrap_err();
    assert!(matches!(err, Error::Capability { ref statistic, .. } if statistic == "entropy"));
}

#[test]
fn retries_transient_failures() {
    let server = spawn(model());
    server.state.fail_first.store(2, Ordering::SeqCst);
    let http = HttpProvider::new(config(&server.url, 6)).unwrap();
    let m = LogprobProvider::<f64>::provide(&http, "a", &[1], &[2, 3]).unwrap();
    assert_eq!(m.rows.len(), 2);
    assert_eq!(server.state.requests.load(Ordering::SeqCst), 3);
}

#[test]
fn gives_up_after_bounded_retries() {
    let server = spawn(model());
    server.state.fail_first.store(100, Ordering::SeqCst);
    let mut cfg = config(&server.url, 6);
    cfg.max_retries = 2;
    let http = HttpProvider::new(cfg).unwrap();
    let err = LogprobProvider::<f64>::provide(&http, "a", &[1], &[2]).unwrap_err();
    assert!(matches!(err, Error::Provider { retriable: true, .. }));
    assert_eq!(server.state.requests.load(Ordering::SeqCst), 3);
}

#[test]
fn unreachable_server_is_retriable_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    drop(listener);
    let mut cfg = config(&url, 6);
    cfg.max_retries = 1;
    let http = HttpProvider::new(cfg).unwrap();
    let err = LogprobProvider::<f64>::provide(&http, "a", &[1], &[2]).unwrap_err();
    assert!(matches!(err, Error::Provider { retriable: true, .. }), "{err}");
}

#[test]
fn cache_serves_repeat_requests() {
    let server = spawn(model());
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(&server.url, 3);
    cfg.cache_dir = Some(dir.path().to_path_buf());
    let http = HttpProvider::new(cfg.clone()).unwrap();
    let a = LogprobProvider::<f64>::provide(&http, "a", &[1, 2], &[3, 4]).unwrap();
    let b = LogprobProvider::<f64>::provide(&http, "a", &[1, 2], &[3, 4]).unwrap();
    assert_eq!(a, b);
    assert_eq!(server.state.requests.load(Ordering::SeqCst), 1);
    // A fresh provider over the same directory resumes from the cache.
    let again = HttpProvider::new(cfg).unwrap();
    let c = LogprobProvider::<f64>::provide(&again, "a", &[1, 2], &[3, 4]).unwrap();
    assert_eq!(a, c);
    assert_eq!(server.state.requests.load(Ordering::SeqCst), 1);
    LogprobProvider::<f64>::provide(&again, "a", &[1, 2], &[3, 5]).unwrap();
    assert_eq!(server.state.requests.load(Ordering::SeqCst), 2);
}

#[test]
fn bearer_token_from_environment() {
    let server = spawn(model());
    std::env::set_var("TEMPNORM_HTTP_TEST_KEY", "sekret");
    let mut cfg = config(&server.url, 6);
    cfg.api_key_env = Some("TEMPNORM_HTTP_TEST_KEY".into());
    let http = HttpProvider::new(cfg).unwrap();
    LogprobProvider::<f64>::provide(&http, "a", &[1], &[2]).unwrap();
    assert_eq!(server.state.auth.lock().unwrap()[0].as_deref(), Some("Bearer sekret"));
}

#[test]
fn in_flight_requests_are_capped() {
    let server = spawn(model());
    server.state.delay_ms.store(40, Ordering::SeqCst);
    let mut cfg = config(&server.url, 6);
    cfg.max_in_flight = 2;
    let http = HttpProvider::new(cfg).unwrap();
    thread::scope(|s| {
        for i in 0..8u32 {
            let http = &http;
            s.spawn(move || LogprobProvider::<f64>::provide(http, "a", &[1], &[i % 6, 2]).unwrap());
        }
    });
    assert_eq!(server.state.requests.load(Ordering::SeqCst), 8);
    assert!(server.state.max_in_flight.load(Ordering::SeqCst) <= 2);
}

#[test]
fn empty_context_needs_bos() {
    let server = spawn(model());
    let http = HttpProvider::new(config(&server.url, 6)).unwrap();
    assert!(matches!(
        LogprobProvider::<f64>::provide(&http, "a", &[], &[2]),
        Err(Error::InvalidParameter(_))
    ));
}
