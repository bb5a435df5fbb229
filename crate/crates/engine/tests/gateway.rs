use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};
use vdr::gateway::{ChatModel, ChatRequest, ChatTurn, HttpTransport, ModelClient, ModelEndpoint, Purpose, RetryPolicy, TransportError};
use vdr::scripted::{ScriptedModel, SequenceTransport};
use vdr::GatewayError;

fn endpoint(max_attempts: u32) -> ModelEndpoint {
    ModelEndpoint {
        retry: RetryPolicy { max_attempts, backoff_base_ms: 1 },
        ..ModelEndpoint::new("http://unused", "m")
    }
}

fn request() -> ChatRequest {
    ChatRequest::new(Purpose::Policy).turn(ChatTurn::user("hello"))
}

fn unavailable() -> Result<String, TransportError> {
    Err(TransportError::Status { code: 503, body: "busy".into() })
}

#[tokio::test]
async fn scripted_echo() {
    let m = ScriptedModel::new(["X"]);
    assert_eq!(m.chat(&request()).await.unwrap().text, "X");
}

#[tokio::test]
async fn two_failures_then_success_takes_three_attempts() {
    let t = SequenceTransport::new([unavailable(), unavailable(), Ok("ok".to_string())]);
    let client = ModelClient::new(endpoint(3), t);
    let reply = client.chat(&request()).await.unwrap();
    assert_eq!((reply.text.as_str(), reply.attempts), ("ok", 3));
}

#[tokio::test]
async fn three_failures_exhaust_three_attempts() {
    let client = ModelClient::new(endpoint(3), SequenceTransport::new([unavailable()]));
    match client.chat(&request()).await {
        Err(GatewayError::Exhausted { attempts, .. }) => assert_eq!(attempts, 3),
        other => panic!("expected exhausted retries, got {other:?}"),
    }
}

#[tokio::test]
async fn client_errors_are_not_retried() {
    let t = SequenceTransport::new([Err(TransportError::Status { code: 400, body: "bad".into() })]);
    let client = ModelClient::new(endpoint(5), t);
    match client.chat(&request()).await {
        Err(GatewayError::Http { status, attempts, .. }) => assert_eq!((status, attempts), (400, 1)),
        other => panic!("expected http error, got {other:?}"),
    }
}

#[tokio::test]
async fn timeouts_carry_attempt_count() {
    struct Slow;
    #[async_trait::async_trait]
    impl vdr::gateway::Transport for Slow {
        async fn send(&self, _: &ModelEndpoint, _: &ChatRequest) -> Result<String, TransportError> {
            tokio::time::sleep(Duration::from_secs(5)).await;
            Ok("late".into())
        }
    }
    let ep = ModelEndpoint { timeout_ms: 20, ..endpoint(2) };
    match ModelClient::new(ep, Slow).chat(&request()).await {
        Err(GatewayError::Timeout { attempts }) => assert_eq!(attempts, 2),
        other => panic!("expected timeout, got {other:?}"),
    }
}

#[tokio::test]
async fn orphan_tool_turn_is_rejected_before_sending() {
    let t = SequenceTransport::new([Ok("x".to_string())]);
    let client = ModelClient::new(endpoint(3), t);
    let req = ChatRequest::new(Purpose::Policy).turn(ChatTurn::tool("c1", "result"));
    assert!(matches!(client.chat(&req).await, Err(GatewayError::InvalidRequest(_))));
}

#[derive(Default)]
struct Fixture {
    in_flight: AtomicUsize,
    peak: AtomicUsize,
    served: AtomicUsize,
    seen: Mutex<Vec<(Option<String>, Value)>>,
}

async fn completions(State(f): State<Arc<Fixture>>, headers: HeaderMap, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    let now = f.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    f.peak.fetch_max(now, Ordering::SeqCst);
    tokio::time::sleep(Duration::from_millis(40)).await;
    let auth = headers.get("authorization").and_then(|v| v.to_str().ok()).map(str::to_string);
    f.seen.lock().unwrap().push((auth, body));
    f.served.fetch_add(1, Ordering::SeqCst);
    f.in_flight.fetch_sub(1, Ordering::SeqCst);
    (StatusCode::OK, Json(json!({"choices": [{"message": {"role": "assistant", "content": "pong"}}]})))
}

async fn serve(fixture: Arc<Fixture>) -> String {
    let app = Router::new().route("/v1/chat/completions", post(completions)).with_state(fixture);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    format!("http://{addr}/v1")
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_calls_never_exceed_max_in_flight() {
    let fixture = Arc::new(Fixture::default());
    let base = serve(fixture.clone()).await;
    let ep = ModelEndpoint { max_in_flight: 3, api_key: Some("k-123".into()), ..ModelEndpoint::new(base, "policy-model") };
    let client = Arc::new(ModelClient::new(ep, HttpTransport::new()));
    let calls = (0..24).map(|_| {
        let c = client.clone();
        tokio::spawn(async move { c.chat(&request()).await })
    });
    for r in futures::future::join_all(calls).await {
        assert_eq!(r.unwrap().unwrap().text, "pong");
    }
    assert_eq!(fixture.served.load(Ordering::SeqCst), 24);
    let peak = fixture.peak.load(Ordering::SeqCst);
    assert!(peak <= 3, "peak in flight {peak}");
    assert!(peak >= 2, "requests were serialized (peak {peak})");
    let seen = fixture.seen.lock().unwrap();
    assert_eq!(seen[0].0.as_deref(), Some("Bearer k-123"));
    assert_eq!(seen[0].1["model"], "policy-model");
    assert_eq!(seen[0].1["messages"][0], json!({"role": "user", "content": "hello"}));
}

#[tokio::test]
async fn http_errors_surface_status() {
    async fn teapot() -> (StatusCode, &'static str) {
        (StatusCode::UNPROCESSABLE_ENTITY, "nope")
    }
    let app = Router::new().route("/chat/completions", post(teapot));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    let client = ModelClient::new(ModelEndpoint::new(format!("http://{addr}"), "m"), HttpTransport::new());
    match client.chat(&request()).await {
        Err(GatewayError::Http { status, body, attempts }) => {
            assert_eq!((status, body.as_str(), attempts), (422, "nope", 1));
        }
        other => panic!("expected http error, got {other:?}"),
    }
}
