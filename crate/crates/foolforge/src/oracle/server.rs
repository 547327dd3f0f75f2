//! Black-box prediction server: one POST endpoint that answers labels and
//! scores, and nothing that could leak parameters or gradients.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};

use crate::victims::Classifier;

use super::wire::{decode_pixels, PredictRequest, Prediction};
use super::OracleError;

#[derive(Debug)]
struct ServerState {
    classifier: Classifier,
    requests: AtomicU64,
    latency_ns_sum: AtomicU64,
    latency_ns_max: AtomicU64,
}

/// Request-log counters of a running or finished server.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServerStats {
    pub requests: u64,
    pub mean_latency_ms: f64,
    pub max_latency_ms: f64,
}

/// Handle to a serving thread; dropping it shuts the server down.
#[derive(Debug)]
pub struct OracleServer {
    addr: SocketAddr,
    state: Arc<ServerState>,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl OracleServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Base endpoint, scheme included.
    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stats(&self) -> ServerStats {
        let requests = self.state.requests.load(Ordering::Relaxed);
        let sum = self.state.latency_ns_sum.load(Ordering::Relaxed);
        let max = self.state.latency_ns_max.load(Ordering::Relaxed);
        ServerStats {
            requests,
            mean_latency_ms: if requests == 0 {
                0.0
            } else {
                sum as f64 / requests as f64 / 1e6
            },
            max_latency_ms: max as f64 / 1e6,
        }
    }

    /// Graceful stop: in-flight requests drain before the thread exits.
    pub fn shutdown(mut self) -> ServerStats {
        self.stop();
        self.stats()
    }

    fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(handle) = self.thread.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for OracleServer {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Starts serving `classifier` on `address` (host:port, port 0 picks a
/// free one). Returns once the socket is bound.
pub fn serve(classifier: Classifier, address: &str) -> Result<OracleServer, OracleError> {
    let state = Arc::new(ServerState {
        classifier,
        requests: AtomicU64::new(0),
        latency_ns_sum: AtomicU64::new(0),
        latency_ns_max: AtomicU64::new(0),
    });
    let (addr_tx, addr_rx) = std::sync::mpsc::channel::<Result<SocketAddr, String>>();
    let (shutdown_tx, shutdown_rx) = tokio::sync::oneshot::channel::<()>();
    let thread_state = state.clone();
    let bind_addr = address.to_string();
    let thread = std::thread::Builder::new()
        .name("oracle-server".into())
        .spawn(move || {
            let runtime = match tokio::runtime::Builder::new_current_thread()
                .enable_all()
                .build()
            {
                Ok(rt) => rt,
                Err(e) => {
                    let _ = addr_tx.send(Err(format!("tokio runtime: {e}")));
                    return;
                }
            };
            runtime.block_on(async move {
                let listener = match tokio::net::TcpListener::bind(&bind_addr).await {
                    Ok(l) => l,
                    Err(e) => {
                        let _ = addr_tx.send(Err(format!("bind {bind_addr}: {e}")));
                        return;
                    }
                };
                let local = listener.local_addr().expect("bound socket has an address");
                let app = Router::new()
                    .route("/v1/predict", post(predict))
                    .with_state(thread_state);
                let _ = addr_tx.send(Ok(local));
                let _ = axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = shutdown_rx.await;
                    })
                    .await;
            });
        })
        .map_err(|e| OracleError::Startup {
            msg: format!("server thread: {e}"),
        })?;
    let addr = addr_rx
        .recv()
        .map_err(|_| OracleError::Startup {
            msg: "server thread exited before binding".into(),
        })?
        .map_err(|msg| OracleError::Startup { msg })?;
    Ok(OracleServer {
        addr,
        state,
        shutdown: Some(shutdown_tx),
        thread: Some(thread),
    })
}

fn bad_request(msg: String) -> (StatusCode, Json<Value>) {
    (StatusCode::BAD_REQUEST, Json(json!({ "error": msg })))
}

async fn predict(State(state): State<Arc<ServerState>>, body: String) -> (StatusCode, Json<Value>) {
    let started = Instant::now();
    let request_id = state.requests.fetch_add(1, Ordering::Relaxed);
    let result = answer(&state.classifier, &body, request_id);
    let elapsed = started.elapsed().as_nanos() as u64;
    state.latency_ns_sum.fetch_add(elapsed, Ordering::Relaxed);
    state.latency_ns_max.fetch_max(elapsed, Ordering::Relaxed);
    match result {
        Ok(value) => (StatusCode::OK, Json(value)),
        Err(msg) => bad_request(msg),
    }
}

fn answer(classifier: &Classifier, body: &str, request_id: u64) -> Result<Value, String> {
    let req: PredictRequest =
        serde_json::from_str(body).map_err(|e| format!("request parse: {e}"))?;
    let (c, h, w) = classifier.spec.input;
    if req.shape != [c, h, w] {
        return Err(format!(
            "shape {:?} does not match the service's [{c}, {h}, {w}] inputs",
            req.shape
        ));
    }
    let image = decode_pixels(&req.pixels_b64, &req.shape).map_err(|e| e.to_string())?;
    if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err("pixels must lie in [0, 1]".into());
    }
    let batch = image
        .reshaped(&[1, c, h, w])
        .map_err(|e| e.to_string())?;
    let probs = classifier.predict(&batch).map_err(|e| e.to_string())?;
    let scores = probs.data();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("softmax scores are finite")
            .then(a.cmp(&b))
    });
    let k = req.top_k.min(scores.len());
    let predictions: Vec<Prediction> = order[..k]
        .iter()
        .map(|&i| Prediction {
            label: classifier.class_names[i].clone(),
            score: scores[i],
        })
        .collect();
    serde_json::to_value(super::wire::PredictResponse {
        request_id,
        predictions,
    })
    .map_err(|e| format!("response encode: {e}"))
}
