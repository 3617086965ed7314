use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use lamp_cli::backend::Backend;
use lamp_cli::server::{router, AppState, JobState, JobStatus};
use lamp_core::gateway::ChatRequest;
use lamp_core::probe::predict;
use lamp_core::{
    run_audit, AuditConfig, AuditSession, ChatBackend, MockModel, ModelEndpoint, SessionStore, SessionSummary,
    TaskTemplate, WeightVector,
};
use reqwest::{Client, StatusCode};
use serde_json::{json, Value};
use tempfile::TempDir;

const TEXT: &str = "A warm, funny film with a forgettable score and one scene that drags.";
const STAMP: &str = "2026-01-01T00:00:00Z";

struct Gauge {
    inner: MockModel,
    current: AtomicUsize,
    peak: AtomicUsize,
}

#[async_trait]
impl ChatBackend for Gauge {
    async fn complete(&self, request: &ChatRequest) -> lamp_core::Result<String> {
        let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        tokio::time::sleep(Duration::from_millis(1)).await;
        let out = self.inner.complete(request).await;
        self.current.fetch_sub(1, Ordering::SeqCst);
        out
    }
}

fn mock_backend(chat: Arc<dyn ChatBackend>, max_in_flight: usize) -> Backend {
    Backend {
        endpoint: ModelEndpoint { max_in_flight, ..ModelEndpoint::mock("mock-sigmoid") },
        task: TaskTemplate::sentiment(),
        chat,
        embed_transcript: false,
    }
}

fn config(seed: u64) -> AuditConfig {
    AuditConfig { seed, created_at: Some(STAMP.into()), ..AuditConfig::default() }
}

async fn stored_session(store: &SessionStore, backend: &Backend, seed: u64) -> AuditSession {
    let session = run_audit(&config(seed), TEXT, &backend.gateway().unwrap()).await.unwrap();
    store.save(&session).unwrap();
    session
}

struct Server {
    base: String,
    client: Client,
    _dir: TempDir,
}

impl Server {
    async fn start(backend: Backend, sessions: &[u64]) -> (Self, Vec<AuditSession>) {
        let dir = TempDir::new().unwrap();
        let store = SessionStore::open(dir.path()).unwrap();
        let mut stored = Vec::new();
        for &seed in sessions {
            stored.push(stored_session(&store, &backend, seed).await);
        }
        let app = router(AppState::new(store, backend, None));
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
        (Self { base, client: Client::new(), _dir: dir }, stored)
    }

    async fn get(&self, path: &str) -> (StatusCode, Value) {
        let res = self.client.get(format!("{}{path}", self.base)).send().await.unwrap();
        (res.status(), res.json().await.unwrap())
    }

    async fn post(&self, path: &str, body: impl Into<reqwest::Body>) -> (StatusCode, Value) {
        let res = self
            .client
            .post(format!("{}{path}", self.base))
            .header("content-type", "application/json")
            .body(body)
            .send()
            .await
            .unwrap();
        (res.status(), res.json().await.unwrap())
    }

    async fn whatif(&self, id: &str, body: Value) -> (StatusCode, Value) {
        self.post(&format!("/api/sessions/{id}/whatif"), body.to_string()).await
    }

    async fn wait_for(&self, job: &str) -> JobStatus {
        for _ in 0..2000 {
            let (status, body) = self.get(&format!("/api/jobs/{job}")).await;
            assert_eq!(status, StatusCode::OK);
            let job: JobStatus = serde_json::from_value(body).unwrap();
            if matches!(job.state, JobState::Succeeded | JobState::Failed) {
                return job;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        panic!("job {job} did not finish");
    }
}

fn sigmoid() -> Arc<dyn ChatBackend> {
    Arc::new(MockModel::preset("sigmoid").unwrap())
}

fn fields(body: &Value) -> Vec<String> {
    body["errors"].as_array().unwrap().iter().map(|e| e["field"].as_str().unwrap().to_string()).collect()
}

#[tokio::test]
async fn lists_and_returns_sessions() {
    let (server, stored) = Server::start(mock_backend(sigmoid(), 8), &[1, 2]).await;
    let (status, body) = server.get("/api/sessions").await;
    assert_eq!(status, StatusCode::OK);
    let list: Vec<SessionSummary> = serde_json::from_value(body).unwrap();
    assert_eq!(list, stored.iter().map(AuditSession::summary).collect::<Vec<_>>());

    let (status, body) = server.get(&format!("/api/sessions/{}", stored[0].id)).await;
    assert_eq!(status, StatusCode::OK);
    let session: AuditSession = serde_json::from_value(body).unwrap();
    assert_eq!(session, stored[0]);
}

#[tokio::test]
async fn unknown_sessions_are_not_found() {
    let (server, _) = Server::start(mock_backend(sigmoid(), 8), &[]).await;
    for id in ["0123456789abcdef", "bad.id", "..%2Fetc"] {
        let (status, body) = server.get(&format!("/api/sessions/{id}")).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{id}");
        assert!(body["error"].as_str().unwrap().contains("not found"));
    }
    let (status, _) = server.whatif("0123456789abcdef", json!({ "weights": [0.1] })).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = server.get("/api/jobs/job-99").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn whatif_at_the_seed_matches_the_surrogate() {
    let (server, stored) = Server::start(mock_backend(sigmoid(), 8), &[3]).await;
    let session = &stored[0];
    let expected = predict(&session.surrogate, &session.seed.w0).unwrap();
    let (status, body) = server.whatif(&session.id, json!({ "weights": session.seed.w0 })).await;
    assert_eq!(status, StatusCode::OK);
    assert!((body["probability"].as_f64().unwrap() - expected.probability).abs() < 1e-12);
    assert!((body["raw"].as_f64().unwrap() - expected.raw).abs() < 1e-12);
    assert_eq!(body["clamped"], json!(false));

    let far = vec![5.0; session.dim()];
    let (_, body) = server.whatif(&session.id, json!({ "weights": far })).await;
    let expected = predict(&session.surrogate, &WeightVector::new(far).unwrap()).unwrap();
    assert_eq!(body["clamped"], json!(expected.clamped));
    assert_eq!(body["probability"].as_f64().unwrap(), expected.probability);
}

#[tokio::test]
async fn whatif_rejects_malformed_weights() {
    let (server, stored) = Server::start(mock_backend(sigmoid(), 8), &[4]).await;
    let id = &stored[0].id;
    let cases = [
        (json!({ "weights": [0.1, 0.2] }), vec!["weights"]),
        (json!({}), vec!["weights"]),
        (json!({ "weights": "0.1" }), vec!["weights"]),
        (json!({ "weights": [0.1, "x", 0.2, -0.5, 0.1] }), vec!["weights[1]", "weights[3]"]),
        (json!({ "weights": [0.1, null] }), vec!["weights", "weights[1]"]),
    ];
    for (body, expected) in cases {
        let (status, reply) = server.whatif(id, body.clone()).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
        assert_eq!(fields(&reply), expected, "{body}");
    }
    let (status, reply) = server.post(&format!("/api/sessions/{id}/whatif"), "{not json").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(fields(&reply), vec!["body"]);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_whatif_calls_are_all_served() {
    let (server, stored) = Server::start(mock_backend(sigmoid(), 8), &[5]).await;
    let server = Arc::new(server);
    let session = stored[0].clone();
    let handles: Vec<_> = (0..32)
        .map(|k| {
            let server = server.clone();
            let id = session.id.clone();
            let w: Vec<f64> = session.seed.w0.as_slice().iter().map(|w| w * (1.0 + 0.01 * k as f64)).collect();
            tokio::spawn(async move { (w.clone(), server.whatif(&id, json!({ "weights": w })).await) })
        })
        .collect();
    for h in handles {
        let (w, (status, body)) = h.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        let expected = predict(&session.surrogate, &WeightVector::new(w).unwrap()).unwrap();
        assert_eq!(body["probability"].as_f64().unwrap(), expected.probability);
    }
}

#[tokio::test]
async fn audit_jobs_produce_the_same_session_as_a_direct_run() {
    let backend = mock_backend(sigmoid(), 8);
    let (server, _) = Server::start(backend.clone(), &[]).await;
    let (status, body) = server.post("/api/audit", json!({ "text": TEXT, "config": config(42) }).to_string()).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(body["state"], "queued");
    let job = server.wait_for(body["id"].as_str().unwrap()).await;
    assert_eq!(job.state, JobState::Succeeded, "{job:?}");

    let direct = run_audit(&config(42), TEXT, &backend.gateway().unwrap()).await.unwrap();
    let (_, body) = server.get(&format!("/api/sessions/{}", job.session_id.unwrap())).await;
    assert_eq!(serde_json::from_value::<AuditSession>(body).unwrap(), direct);
}

#[tokio::test]
async fn audit_requests_are_validated() {
    let (server, _) = Server::start(mock_backend(sigmoid(), 8), &[]).await;
    let cases = [
        (json!({ "text": "  ", "config": { "delta": 0.0 } }), vec!["text", "config"]),
        (json!({ "text": TEXT, "task": "weather" }), vec!["task"]),
        (json!({ "config": {} }), vec!["body"]),
    ];
    for (body, expected) in cases {
        let (status, reply) = server.post("/api/audit", body.to_string()).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
        assert_eq!(fields(&reply), expected, "{body}");
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn audit_jobs_share_one_endpoint_pool() {
    let gauge = Arc::new(Gauge {
        inner: MockModel::preset("sigmoid").unwrap(),
        current: AtomicUsize::new(0),
        peak: AtomicUsize::new(0),
    });
    let (server, _) = Server::start(mock_backend(gauge.clone(), 4), &[]).await;
    let mut jobs = Vec::new();
    for seed in 0..3 {
        let (status, body) =
            server.post("/api/audit", json!({ "text": TEXT, "config": config(seed) }).to_string()).await;
        assert_eq!(status, StatusCode::ACCEPTED);
        jobs.push(body["id"].as_str().unwrap().to_string());
    }
    let mut ids = Vec::new();
    for job in &jobs {
        let done = server.wait_for(job).await;
        assert_eq!(done.state, JobState::Succeeded);
        ids.push(done.session_id.unwrap());
    }
    assert_eq!(gauge.peak.load(Ordering::SeqCst), 4);
    ids.dedup();
    assert_eq!(ids.len(), 3);
    let (_, list) = server.get("/api/sessions").await;
    assert_eq!(list.as_array().unwrap().len(), 3);
}

#[tokio::test]
async fn failed_jobs_report_their_stage() {
    let mut model = MockModel::preset("sigmoid").unwrap();
    model.faults.rename_fixed_factor = Some(0);
    let (server, _) = Server::start(mock_backend(Arc::new(model), 8), &[]).await;
    let (_, body) = server.post("/api/audit", json!({ "text": TEXT, "config": config(1) }).to_string()).await;
    let job = server.wait_for(body["id"].as_str().unwrap()).await;
    assert_eq!(job.state, JobState::Failed);
    assert_eq!(job.stage.as_deref(), Some("seed"));
    assert!(job.session_id.is_none());
}

#[tokio::test]
async fn serves_the_ui() {
    let (server, _) = Server::start(mock_backend(sigmoid(), 8), &[]).await;
    let res = server.client.get(format!("{}/", server.base)).send().await.unwrap();
    assert_eq!(res.status(), StatusCode::OK);
    assert!(res.text().await.unwrap().contains("/api/sessions"));

    let ui = TempDir::new().unwrap();
    std::fs::write(ui.path().join("index.html"), "<p>custom</p>").unwrap();
    let store = SessionStore::open(ui.path().join("sessions")).unwrap();
    let app = router(AppState::new(store, mock_backend(sigmoid(), 8), Some(ui.path().to_path_buf())));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    let body = Client::new().get(format!("{base}/")).send().await.unwrap().text().await.unwrap();
    assert_eq!(body, "<p>custom</p>");
    let status = Client::new().get(format!("{base}/api/sessions")).send().await.unwrap().status();
    assert_eq!(status, StatusCode::OK);
}
