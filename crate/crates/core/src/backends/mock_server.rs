//! In-process HTTP server speaking the rt-encode protocol over any local
//! backend. Used by tests and by `rt serve`.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::header::AUTHORIZATION;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::Router;
use tokio::sync::oneshot;

use crate::backends::protocol::{EncodeRequest, EncodeResponse, ErrorBody, ENCODE_PATH, PROTOCOL_VERSION};
use crate::backends::EncoderBackend;
use crate::error::{Error, Result};
use crate::model::Embedding;

/// How the server answers well-formed requests.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Behavior {
    /// Encode with the wrapped backend.
    #[default]
    Faithful,
    /// Always return this vector, unnormalized.
    Fixed(Vec<f64>),
    /// Return a vector of this width (and a matching `dim`).
    WrongDim(usize),
    /// `dim` field disagrees with the embedding length.
    InconsistentDim,
    /// 200 with a body that is not JSON.
    Malformed,
    /// Sleep before answering faithfully.
    Delay(Duration),
}

struct Shared {
    backend: Arc<dyn EncoderBackend<f64>>,
    behavior: Mutex<Behavior>,
    fail_next: AtomicUsize,
    bodies: Mutex<Vec<Vec<u8>>>,
    token: Mutex<Option<String>>,
}

pub struct MockServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl MockServer {
    /// Binds an ephemeral port on 127.0.0.1 and serves on a background thread.
    pub fn start(backend: Arc<dyn EncoderBackend<f64>>) -> Result<Self> {
        Self::bind("127.0.0.1:0".parse().expect("literal addr"), backend)
    }

    pub fn bind(addr: SocketAddr, backend: Arc<dyn EncoderBackend<f64>>) -> Result<Self> {
        let shared = Arc::new(Shared {
            backend,
            behavior: Mutex::new(Behavior::Faithful),
            fail_next: AtomicUsize::new(0),
            bodies: Mutex::new(Vec::new()),
            token: Mutex::new(None),
        });
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let listener = runtime.block_on(tokio::net::TcpListener::bind(addr))?;
        let addr = listener.local_addr()?;
        let (tx, rx) = oneshot::channel::<()>();
        let app = router(shared.clone());
        let thread = std::thread::spawn(move || {
            runtime.block_on(async move {
                let _ = axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
            });
        });
        Ok(Self {
            addr,
            shared,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Base URL suitable for [`super::RemoteConfig::endpoint`].
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn set_behavior(&self, behavior: Behavior) {
        *self.shared.behavior.lock().unwrap() = behavior;
    }

    /// Rejects requests without `Authorization: Bearer <token>` (HTTP 401).
    pub fn require_token(&self, token: Option<String>) {
        *self.shared.token.lock().unwrap() = token;
    }

    /// Answers the next `n` requests with HTTP 503.
    pub fn fail_next(&self, n: usize) {
        self.shared.fail_next.store(n, Ordering::SeqCst);
    }

    /// Raw request bodies received so far.
    pub fn request_bodies(&self) -> Vec<Vec<u8>> {
        self.shared.bodies.lock().unwrap().clone()
    }

    /// Blocks until the server thread exits (it only exits on drop).
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn router(shared: Arc<Shared>) -> Router {
    Router::new().route(ENCODE_PATH, post(handle)).with_state(shared)
}

fn error_response(status: StatusCode, msg: impl Into<String>) -> Response {
    let body = serde_json::to_vec(&ErrorBody { error: msg.into() }).expect("serializable");
    (status, [("content-type", "application/json")], body).into_response()
}

fn json_response(resp: &EncodeResponse) -> Response {
    let body = serde_json::to_vec(resp).expect("serializable");
    (StatusCode::OK, [("content-type", "application/json")], body).into_response()
}

async fn handle(State(shared): State<Arc<Shared>>, headers: HeaderMap, body: Bytes) -> Response {
    shared.bodies.lock().unwrap().push(body.to_vec());
    let token = shared.token.lock().unwrap().clone();
    if let Some(token) = token {
        let presented = headers
            .get(AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_str()) {
            return error_response(StatusCode::UNAUTHORIZED, "missing or wrong bearer token");
        }
    }
    let failing = shared
        .fail_next
        .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
        .is_ok();
    if failing {
        return error_response(StatusCode::SERVICE_UNAVAILABLE, "injected transient failure");
    }

    let req: EncodeRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, format!("bad request body: {e}")),
    };
    if req.version != PROTOCOL_VERSION {
        return error_response(StatusCode::BAD_REQUEST, format!("unsupported version {}", req.version));
    }

    let behavior = shared.behavior.lock().unwrap().clone();
    let dim = shared.backend.dim();
    let respond = |embedding: Vec<f64>| {
        json_response(&EncodeResponse {
            version: PROTOCOL_VERSION,
            dim: embedding.len(),
            embedding,
        })
    };
    match behavior {
        Behavior::Fixed(v) => return respond(v),
        Behavior::WrongDim(n) => return respond(vec![1.0; n]),
        Behavior::InconsistentDim => {
            return json_response(&EncodeResponse {
                version: PROTOCOL_VERSION,
                embedding: vec![1.0; dim],
                dim: dim + 1,
            })
        }
        Behavior::Malformed => return (StatusCode::OK, "this is not json").into_response(),
        Behavior::Delay(d) => tokio::time::sleep(d).await,
        Behavior::Faithful => {}
    }

    let backend = shared.backend.clone();
    let result = tokio::task::spawn_blocking(move || -> Result<Vec<f64>> {
        let prefix = req
            .prefix_vectors
            .into_iter()
            .map(Embedding::new)
            .collect::<Result<Vec<_>>>()?;
        Ok(backend.encode(&req.text, &prefix)?.into_values())
    })
    .await;
    match result {
        Ok(Ok(v)) => respond(v),
        Ok(Err(
            e @ (Error::DimMismatch { .. } | Error::InvalidInput(_) | Error::NonFinite(_) | Error::ZeroNorm),
        )) => {
            error_response(StatusCode::UNPROCESSABLE_ENTITY, e.to_string())
        }
        Ok(Err(e)) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}
