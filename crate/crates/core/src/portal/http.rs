//! JSON-over-HTTP front of the portal, plus the live event stream and pump
//! toggle used by the dashboard.
//!
//! Handlers never touch device state: each request travels over a channel
//! to the control loop, which answers through a oneshot.

use std::convert::Infallible;
use std::io;
use std::net::{SocketAddr, TcpListener as StdListener};
use std::thread::JoinHandle;
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, mpsc, oneshot};
use tokio_stream::wrappers::BroadcastStream;
use tokio_stream::StreamExt;

use super::{ApplicationForm, NetworkConfig, PortalError, PortalReply, PortalRequest};
use crate::actuation::Action;

const REPLY_TIMEOUT: Duration = Duration::from_secs(5);
const EVENT_BUFFER: usize = 256;
const REQUEST_QUEUE: usize = 64;

/// One topic update on `/api/stream`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamEvent {
    pub topic: String,
    pub payload: String,
    pub ts: DateTime<Utc>,
}

type Envelope = (PortalRequest, oneshot::Sender<PortalReply>);

/// The HTTP side's view of the device.
#[derive(Clone)]
pub struct PortalHandle {
    tx: mpsc::Sender<Envelope>,
    events: broadcast::Sender<StreamEvent>,
}

/// The control loop's end of the channel.
pub struct PortalInbox {
    rx: mpsc::Receiver<Envelope>,
    events: broadcast::Sender<StreamEvent>,
}

pub fn channel() -> (PortalHandle, PortalInbox) {
    let (tx, rx) = mpsc::channel(REQUEST_QUEUE);
    let (events, _) = broadcast::channel(EVENT_BUFFER);
    (
        PortalHandle {
            tx,
            events: events.clone(),
        },
        PortalInbox { rx, events },
    )
}

/// Reply slot for one request.
pub struct Responder(oneshot::Sender<PortalReply>);

impl Responder {
    pub fn send(self, reply: PortalReply) {
        // the handler may have timed out already
        let _ = self.0.send(reply);
    }
}

impl PortalInbox {
    /// Next pending request, without blocking.
    pub fn try_next(&mut self) -> Option<(PortalRequest, Responder)> {
        self.rx.try_recv().ok().map(|(req, tx)| (req, Responder(tx)))
    }

    /// Fans an update out to every stream subscriber.
    pub fn publish(&self, event: StreamEvent) {
        let _ = self.events.send(event);
    }
}

impl PortalHandle {
    async fn ask(&self, req: PortalRequest) -> PortalReply {
        let (tx, rx) = oneshot::channel();
        let unavailable = || PortalError {
            status: 503,
            code: "unavailable",
            detail: "device control loop is not running".into(),
            field: None,
        };
        self.tx.send((req, tx)).await.map_err(|_| unavailable())?;
        match tokio::time::timeout(REPLY_TIMEOUT, rx).await {
            Ok(Ok(reply)) => reply,
            _ => Err(unavailable()),
        }
    }
}

struct Reply(PortalReply);

impl IntoResponse for Reply {
    fn into_response(self) -> Response {
        match self.0 {
            Ok(body) => (StatusCode::OK, Json(body)).into_response(),
            Err(e) => {
                let status = StatusCode::from_u16(e.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
                (status, Json(e.body())).into_response()
            }
        }
    }
}

fn rejected(r: JsonRejection) -> Reply {
    Reply(Err(PortalError::bad_request(r.body_text())))
}

async fn networks(State(h): State<PortalHandle>) -> Reply {
    Reply(h.ask(PortalRequest::ListNetworks).await)
}

async fn apply_network(State(h): State<PortalHandle>, body: Result<Json<NetworkConfig>, JsonRejection>) -> Reply {
    match body {
        Ok(Json(cfg)) => Reply(h.ask(PortalRequest::ApplyNetwork(cfg)).await),
        Err(r) => rejected(r),
    }
}

async fn network_info(State(h): State<PortalHandle>) -> Reply {
    Reply(h.ask(PortalRequest::NetworkInfo).await)
}

async fn application_options(State(h): State<PortalHandle>) -> Reply {
    Reply(h.ask(PortalRequest::ApplicationOptions).await)
}

async fn submit_application(
    State(h): State<PortalHandle>,
    body: Result<Json<ApplicationForm>, JsonRejection>,
) -> Reply {
    match body {
        Ok(Json(form)) => Reply(h.ask(PortalRequest::SubmitApplication(form)).await),
        Err(r) => rejected(r),
    }
}

async fn state(State(h): State<PortalHandle>) -> Reply {
    Reply(h.ask(PortalRequest::State).await)
}

#[derive(Deserialize)]
struct PumpBody {
    action: Action,
}

async fn pump(State(h): State<PortalHandle>, body: Result<Json<PumpBody>, JsonRejection>) -> Reply {
    match body {
        Ok(Json(b)) => Reply(h.ask(PortalRequest::Pump(b.action)).await),
        Err(r) => rejected(r),
    }
}

async fn stream(State(h): State<PortalHandle>) -> Sse<impl tokio_stream::Stream<Item = Result<Event, Infallible>>> {
    let updates = BroadcastStream::new(h.events.subscribe()).filter_map(|r| {
        // lagging subscribers just skip what they missed
        let ev = r.ok()?;
        Some(Ok(Event::default().json_data(&ev).expect("event serializes")))
    });
    Sse::new(updates).keep_alive(KeepAlive::default())
}

async fn index() -> Html<&'static str> {
    Html(INDEX_HTML)
}

async fn not_found() -> Reply {
    Reply(Err(PortalError::not_found("no such endpoint")))
}

pub fn router(handle: PortalHandle) -> Router {
    Router::new()
        .route("/", get(index))
        .route("/api/networks", get(networks))
        .route("/api/network", post(apply_network))
        .route("/api/network/info", get(network_info))
        .route("/api/application/options", get(application_options))
        .route("/api/application", post(submit_application))
        .route("/api/state", get(state))
        .route("/api/stream", get(stream))
        .route("/api/pump", post(pump))
        .fallback(not_found)
        .with_state(handle)
}

/// The HTTP server on its own thread and runtime. Dropping it stops it.
pub struct PortalServer {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl PortalServer {
    pub fn start(addr: SocketAddr, handle: PortalHandle) -> io::Result<Self> {
        let listener = StdListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .thread_name("portal-http")
            .enable_all()
            .build()?;
        let (stop, stopped) = oneshot::channel::<()>();
        let thread = std::thread::Builder::new().name("portal".into()).spawn(move || {
            rt.block_on(async move {
                let listener = match tokio::net::TcpListener::from_std(listener) {
                    Ok(l) => l,
                    Err(e) => {
                        log::error!("portal listener: {e}");
                        return;
                    }
                };
                tokio::select! {
                    r = axum::serve(listener, router(handle)) => {
                        if let Err(e) = r {
                            log::error!("portal server stopped: {e}");
                        }
                    }
                    _ = stopped => {}
                }
            });
            // open event streams would otherwise hold the runtime
            rt.shutdown_timeout(Duration::from_millis(200));
        })?;
        log::info!("portal listening on http://{addr}");
        Ok(PortalServer {
            addr,
            stop: Some(stop),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for PortalServer {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

const INDEX_HTML: &str = r#"<!doctype html>
<html lang="en">
<head><meta charset="utf-8"><title>fieldpod</title></head>
<body>
<h1>fieldpod</h1>
<p>Configuration portal. The JSON API:</p>
<ul>
<li><a href="/api/state">GET /api/state</a></li>
<li><a href="/api/networks">GET /api/networks</a> &middot; POST /api/network</li>
<li><a href="/api/network/info">GET /api/network/info</a></li>
<li><a href="/api/application/options">GET /api/application/options</a> &middot; POST /api/application</li>
<li>GET /api/stream (server-sent events) &middot; POST /api/pump</li>
</ul>
</body>
</html>
"#;
