//! Scripted chat-completion server for hermetic tests and benchmarks.
//!
//! Serves `POST /v1/chat/completions` from a [`ScriptBook`] and
//! `GET /v1/models` for reachability probes. Throttle faults answer 429 and
//! unknown digests without a fallback answer 404. The server keeps a
//! high-water mark of concurrently open requests.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use scenechat_core::llm::{approx_tokens, ChatRequest, ScriptBook, ScriptReply, Stage, Usage};
use serde_json::json;
use tokio::sync::oneshot;

use crate::transport::{WireResponse, CHAT_PATH, MODELS_PATH, STAGE_HEADER};

#[derive(Debug, Clone, Copy, Default)]
pub struct ServerOptions {
    /// Fixed delay before each chat reply.
    pub latency: Duration,
    pub worker_threads: Option<usize>,
}

#[derive(Debug, Default)]
struct Stats {
    in_flight: AtomicUsize,
    high_water: AtomicUsize,
    requests: AtomicU64,
    throttled: AtomicU64,
    not_found: AtomicU64,
}

struct InFlight<'a>(&'a Stats);

impl<'a> InFlight<'a> {
    fn enter(stats: &'a Stats) -> Self {
        let now = stats.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        stats.high_water.fetch_max(now, Ordering::SeqCst);
        InFlight(stats)
    }
}

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

struct AppState {
    book: Arc<ScriptBook>,
    stats: Arc<Stats>,
    latency: Duration,
}

pub struct ScriptedServer {
    addr: SocketAddr,
    stats: Arc<Stats>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

fn error_body(status: StatusCode, message: String) -> Response {
    (status, Json(json!({"error": {"message": message}}))).into_response()
}

async fn chat(State(st): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Response {
    let _guard = InFlight::enter(&st.stats);
    st.stats.requests.fetch_add(1, Ordering::SeqCst);
    let req: ChatRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error_body(StatusCode::BAD_REQUEST, e.to_string()),
    };
    if let Err(e) = req.validate() {
        return error_body(StatusCode::BAD_REQUEST, e.to_string());
    }
    if !st.latency.is_zero() {
        tokio::time::sleep(st.latency).await;
    }
    let stage = headers
        .get(STAGE_HEADER)
        .and_then(|v| v.to_str().ok())
        .and_then(|s| s.parse::<Stage>().ok());
    match st.book.respond(stage, &req.messages) {
        ScriptReply::Content(content) => {
            let usage = Usage {
                prompt_tokens: req.messages.iter().map(|m| approx_tokens(&m.content)).sum(),
                completion_tokens: approx_tokens(&content),
            };
            Json(WireResponse::completion(&req.model, content, usage)).into_response()
        }
        ScriptReply::Throttled => {
            st.stats.throttled.fetch_add(1, Ordering::SeqCst);
            error_body(StatusCode::TOO_MANY_REQUESTS, "throttled".into())
        }
        ScriptReply::NotFound => {
            st.stats.not_found.fetch_add(1, Ordering::SeqCst);
            error_body(
                StatusCode::NOT_FOUND,
                format!("no scripted reply for digest {}", req.digest()),
            )
        }
    }
}

async fn models() -> Json<serde_json::Value> {
    Json(json!({"object": "list", "data": [{"id": "scripted", "object": "model"}]}))
}

impl ScriptedServer {
    /// Binds an ephemeral localhost port and serves on a background runtime.
    pub fn start(book: Arc<ScriptBook>, opts: ServerOptions) -> std::io::Result<Self> {
        Self::bind("127.0.0.1:0", book, opts)
    }

    pub fn bind(addr: &str, book: Arc<ScriptBook>, opts: ServerOptions) -> std::io::Result<Self> {
        let listener = std::net::TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let stats = Arc::new(Stats::default());
        let state = Arc::new(AppState {
            book,
            stats: stats.clone(),
            latency: opts.latency,
        });
        let app = Router::new()
            .route(CHAT_PATH, post(chat))
            .route(MODELS_PATH, get(models))
            .with_state(state);
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(opts.worker_threads.unwrap_or(4))
            .enable_all()
            .build()?;
        let (tx, rx) = oneshot::channel::<()>();
        let thread = std::thread::Builder::new().name("scripted-llm".into()).spawn(move || {
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener).expect("listener");
                let _ = axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
            });
        })?;
        Ok(Self {
            addr,
            stats,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn high_water(&self) -> usize {
        self.stats.high_water.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> u64 {
        self.stats.requests.load(Ordering::SeqCst)
    }

    pub fn throttled(&self) -> u64 {
        self.stats.throttled.load(Ordering::SeqCst)
    }

    pub fn not_found(&self) -> u64 {
        self.stats.not_found.load(Ordering::SeqCst)
    }

    /// Blocks until the server is stopped by [`Drop`] in another owner.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ScriptedServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
