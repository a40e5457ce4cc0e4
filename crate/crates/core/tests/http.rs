//! HTTP gateway and embedding client against a local mock server.

mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;

use cicl_core::corpus::Task;
use cicl_core::gateway::{
    read_capture, render_continuation, CaptureLog, CapturingGateway, GatewayError, HttpConfig, HttpGateway,
    LlmGateway, ReplayGateway, SamplingParams,
};
use cicl_core::orchestrator::RunStatus;
use cicl_core::parsing::{extract_test_input, PredictionSet};
use cicl_core::retrieval::{EmbedItem, EmbeddingProvider, HashEmbeddingProvider, HttpEmbeddingProvider};
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Request {
    path: String,
    authorization: Option<String>,
    body: Value,
}

type Handler = dyn Fn(usize, &Request) -> (u16, String) + Send + Sync;

struct MockServer {
    base_url: String,
    requests: Arc<Mutex<Vec<Request>>>,
}

impl MockServer {
    fn start(handler: impl Fn(usize, &Request) -> (u16, String) + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base_url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = requests.clone();
        let handler: Arc<Handler> = Arc::new(handler);
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { break };
                let log = log.clone();
                let handler = handler.clone();
                thread::spawn(move || serve(stream, &log, handler.as_ref()));
            }
        });
        MockServer { base_url, requests }
    }

    fn requests(&self) -> Vec<Request> {
        self.requests.lock().unwrap().clone()
    }

    fn config(&self) -> HttpConfig {
        HttpConfig {
            base_url: self.base_url.clone(),
            model: "mock-model".into(),
            initial_backoff_ms: 1,
            max_attempts: 4,
            timeout_secs: 10,
            ..HttpConfig::default()
        }
    }
}

fn serve(stream: TcpStream, log: &Mutex<Vec<Request>>, handler: &Handler) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut request_line = String::new();
    if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
        return;
    }
    let path = request_line.split_whitespace().nth(1).unwrap_or("").to_string();
    let mut content_length = 0;
    let mut authorization = None;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        let (name, value) = line.split_once(':').unwrap();
        match name.to_ascii_lowercase().as_str() {
            "content-length" => content_length = value.trim().parse().unwrap(),
            "authorization" => authorization = Some(value.trim().to_string()),
            _ => {}
        }
    }
    let mut body = vec![0; content_length];
    reader.read_exact(&mut body).unwrap();
    let request = Request {
        path,
        authorization,
        body: serde_json::from_slice(&body).unwrap_or(Value::Null),
    };
    let index = {
        let mut log = log.lock().unwrap();
        log.push(request.clone());
        log.len() - 1
    };
    let (status, body) = handler(index, &request);
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
}

fn completion(text: &str) -> String {
    json!({"choices": [{"text": text}], "usage": {"prompt_tokens": 3, "completion_tokens": 2, "total_tokens": 5}})
        .to_string()
}

#[test]
fn retries_server_errors_then_succeeds() {
    let server = MockServer::start(|i, _| if i < 2 { (500, "busy".into()) } else { (200, completion("ok")) });
    let mut config = server.config();
    config.api_key = Some("secret".into());
    let gateway = HttpGateway::new(config).unwrap();
    let c = gateway.complete("prompt text", &SamplingParams::default().with_seed(7)).unwrap();
    assert_eq!(c.text, "ok");
    assert_eq!(c.retries, 2);
    assert_eq!(c.model_tag, "mock-model");
    assert_eq!(c.usage.unwrap().completion_tokens, 2);

    let reqs = server.requests();
    assert_eq!(reqs.len(), 3);
    let r = &reqs[2];
    assert_eq!(r.path, "/v1/completions");
    assert_eq!(r.authorization.as_deref(), Some("Bearer secret"));
    assert_eq!(r.body["prompt"], "prompt text");
    assert_eq!(r.body["model"], "mock-model");
    assert_eq!(r.body["top_p"], 0.7);
    assert_eq!(r.body["temperature"], 0.3);
    assert_eq!(r.body["max_tokens"], 512);
    assert_eq!(r.body["stop"], json!(["\ndef "]));
    assert_eq!(r.body["seed"], 7);
}

#[test]
fn auth_failure_is_not_retried() {
    let server = MockServer::start(|_, _| (401, "no".into()));
    let gateway = HttpGateway::new(server.config()).unwrap();
    let err = gateway.complete("p", &SamplingParams::default()).unwrap_err();
    assert!(matches!(err, GatewayError::Auth { status: 401 }));
    assert_eq!(server.requests().len(), 1);
}

#[test]
fn rate_limit_exhausts_attempts() {
    let server = MockServer::start(|_, _| (429, "slow down".into()));
    let config = HttpConfig {
        max_attempts: 3,
        ..server.config()
    };
    let err = HttpGateway::new(config).unwrap().complete("p", &SamplingParams::default()).unwrap_err();
    match err {
        GatewayError::Exhausted {
            attempts, last_status, ..
        } => {
            assert_eq!(attempts, 3);
            assert_eq!(last_status, Some(429));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(server.requests().len(), 3);
}

#[test]
fn client_error_fails_fast() {
    let server = MockServer::start(|_, _| (400, "bad".into()));
    let err = HttpGateway::new(server.config()).unwrap().complete("p", &SamplingParams::default()).unwrap_err();
    assert!(matches!(err, GatewayError::Http { status: 400, .. }));
    assert_eq!(server.requests().len(), 1);
}

#[test]
fn greedy_decoding_sends_zero_temperature() {
    let server = MockServer::start(|_, _| (200, completion("")));
    let params = SamplingParams {
        do_sample: false,
        ..SamplingParams::default()
    };
    HttpGateway::new(server.config()).unwrap().complete("p", &params).unwrap();
    assert_eq!(server.requests()[0].body["temperature"], 0.0);
}

#[test]
fn chat_adapter() {
    let server = MockServer::start(|_, _| {
        (200, json!({"choices": [{"message": {"role": "assistant", "content": "reply"}}]}).to_string())
    });
    let config = HttpConfig {
        chat: true,
        base_url: format!("{}/v1/", server.base_url),
        ..server.config()
    };
    let c = HttpGateway::new(config).unwrap().complete("code", &SamplingParams::default()).unwrap();
    assert_eq!(c.text, "reply");
    let r = &server.requests()[0];
    assert_eq!(r.path, "/v1/chat/completions");
    assert_eq!(r.body["messages"][1]["content"], "code");
}

#[test]
fn embeddings_client_retries_and_orders_by_index() {
    let server = MockServer::start(|i, _| {
        if i == 0 {
            (503, String::new())
        } else {
            let data = json!({"data": [
                {"index": 1, "embedding": [0.0, 1.0]},
                {"index": 0, "embedding": [1.0, 0.0]},
            ]});
            (200, data.to_string())
        }
    });
    let provider = HttpEmbeddingProvider::new(server.config()).unwrap();
    let items = [EmbedItem { id: "a", text: "first" }, EmbedItem { id: "b", text: "second" }];
    let vectors = provider.embed(&items).unwrap();
    assert_eq!(vectors, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let reqs = server.requests();
    assert_eq!(reqs.len(), 2);
    assert_eq!(reqs[1].path, "/v1/embeddings");
    assert_eq!(reqs[1].body["input"], json!(["first", "second"]));
    assert_eq!(provider.tag(), "http:mock-model");
}

/// Full run over HTTP: the mock answers each prompt with the gold targets
/// of the sentence it ends with, then the captured log replays offline.
#[test]
fn pipeline_over_http_then_replay() {
    let pair = common::ner();
    let sentences = common::all_sentences(&pair);
    let server = MockServer::start(move |_, req| {
        let prompt = req.body["prompt"].as_str().unwrap_or_default();
        let reply = extract_test_input(prompt)
            .and_then(|text| sentences.iter().find(|s| s.text == text))
            .map(|s| render_continuation(&PredictionSet::gold(s, Task::Ner)))
            .unwrap_or_default();
        (200, completion(&reply))
    });
    let work = tempfile::tempdir().unwrap();
    let log = work.path().join("capture.jsonl");
    let mut config = common::config(&work.path().join("live"), 4, 1);
    config.seeds = vec![13];
    config.capture_log = Some(log.clone());

    let gateway = CapturingGateway::new(HttpGateway::new(server.config()).unwrap(), CaptureLog::open(&log).unwrap());
    let live = common::experiment(&pair, config.clone()).run(&gateway, &HashEmbeddingProvider::new(64)).unwrap();
    assert_eq!(live.status, RunStatus::Complete);
    assert_eq!(live.mean_f1, 1.0);
    assert_eq!(live.seeds[0].parseable, pair.1.len());

    let records = read_capture(&log).unwrap();
    assert_eq!(records.len(), server.requests().len());
    assert!(records.iter().all(|r| r.status == 200 && r.model == "mock-model"));

    config.output_dir = work.path().join("offline");
    let replay = ReplayGateway::from_records(records);
    let offline = common::experiment(&pair, config).run(&replay, &HashEmbeddingProvider::new(64)).unwrap();
    assert_eq!(offline, live);
}

#[test]
fn unreachable_backend_yields_partial_run() {
    // Bind then drop to get a port nobody listens on.
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let config = HttpConfig {
        base_url: format!("http://127.0.0.1:{port}"),
        max_attempts: 2,
        initial_backoff_ms: 1,
        ..HttpConfig::default()
    };
    let pair = common::ner();
    let work = tempfile::tempdir().unwrap();
    let mut exp_config = common::config(work.path(), 3, 0);
    exp_config.seeds = vec![1];
    let report = common::experiment(&pair, exp_config)
        .run(&HttpGateway::new(config).unwrap(), &HashEmbeddingProvider::new(16))
        .unwrap();
    assert_eq!(report.status, RunStatus::Partial);
    assert_eq!(report.exit_code(), 3);
    let failure = report.seeds[0].failure.as_deref().unwrap();
    assert!(failure.contains("2 attempt"), "{failure}");
    // Partial artifacts survive.
    assert!(work.path().join(&report.seeds[0].artifacts).join("report.json").exists());
}
