//! Read-only HTTP service: `POST /route`, `POST /answer`, `GET /healthz`.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::adaptive::AdaptiveConfig;
use crate::agent::AgentId;
use crate::dataset::QAInstance;
use crate::error::{Error, Result};
use crate::graph::TypedGraph;
use crate::pipeline::{answer_one, resolve_adaptive, AdaptiveOverrides, Context};
use crate::pool::AgentSpec;
use crate::router::{forward, RouterParams};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Query {
    pub question: String,
    #[serde(default)]
    pub context: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentWeight {
    pub agent: AgentId,
    pub prob: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RouteResponse {
    /// Descending probability, ties by id.
    pub agents: Vec<AgentWeight>,
    pub entities: usize,
}

/// Immutable model state shared by all requests.
pub struct ServiceState {
    pub ctx: Context,
    pub agents: Vec<AgentSpec>,
    pub params: RouterParams,
    pub adaptive: AdaptiveConfig,
}

impl ServiceState {
    pub fn load(ctx: Context) -> Result<Self> {
        let agents = ctx.agents()?;
        let params = ctx.load_router()?.params;
        let adaptive = resolve_adaptive(&ctx, AdaptiveOverrides::default(), agents.len())?;
        Ok(Self {
            ctx,
            agents,
            params,
            adaptive,
        })
    }

    fn instance(q: &Query) -> QAInstance {
        let d = Sha256::digest(format!("{}\0{}", q.question, q.context).as_bytes());
        QAInstance {
            id: format!("serve-{}", &hex::encode(d)[..16]),
            question: q.question.clone(),
            context: q.context.clone(),
            gold_answers: Vec::new(),
            category: None,
        }
    }

    /// Graph for a query. Agent-view lookups that fail fall back to offline views,
    /// so routing never depends on backend availability.
    fn graph(&self, inst: &QAInstance) -> Result<TypedGraph> {
        match self.ctx.compile(inst, &self.agents) {
            Err(Error::Backend { message, .. }) => {
                log::warn!("agent views unavailable ({message}); using offline views");
                self.ctx.compile_offline(inst, &self.agents)
            }
            other => other,
        }
    }

    pub fn route(&self, q: &Query) -> Result<RouteResponse> {
        let inst = Self::instance(q);
        let g = self.graph(&inst)?;
        let dist = forward(&self.params, &g)?;
        let mut agents: Vec<AgentWeight> = dist
            .agents
            .iter()
            .zip(dist.probs.iter().zip(&dist.scores))
            .map(|(a, (&prob, &score))| AgentWeight {
                agent: a.clone(),
                prob,
                score,
            })
            .collect();
        agents.sort_by(|a, b| b.prob.total_cmp(&a.prob).then_with(|| a.agent.cmp(&b.agent)));
        Ok(RouteResponse {
            agents,
            entities: g.count(crate::graph::NodeKind::Entity),
        })
    }

    pub fn answer(&self, q: &Query) -> Result<crate::adaptive::AdaptiveResult> {
        let inst = Self::instance(q);
        let g = self.graph(&inst)?;
        let by_id: BTreeMap<AgentId, &AgentSpec> = self.agents.iter().map(|a| (a.id.clone(), a)).collect();
        let (result, _) = answer_one(
            &self.params,
            &g,
            &inst,
            &by_id,
            &self.ctx.cache,
            self.ctx.config.pool.retries,
            &self.adaptive,
        )?;
        Ok(result)
    }
}

fn error_response(status: StatusCode, message: String) -> Response {
    (status, Json(json!({ "error": message }))).into_response()
}

fn parse(body: &Bytes) -> std::result::Result<Query, Response> {
    serde_json::from_slice(body).map_err(|e| {
        error_response(
            StatusCode::BAD_REQUEST,
            format!("expected {{\"question\": string, \"context\": string}}: {e}"),
        )
    })
}

fn status_for(e: &Error) -> StatusCode {
    match e {
        Error::Backend { .. } => StatusCode::SERVICE_UNAVAILABLE,
        Error::Validation(_) => StatusCode::BAD_REQUEST,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

async fn blocking<T, F>(state: Arc<ServiceState>, f: F) -> Response
where
    T: Serialize + Send + 'static,
    F: FnOnce(&ServiceState) -> Result<T> + Send + 'static,
{
    match tokio::task::spawn_blocking(move || f(&state)).await {
        Ok(Ok(v)) => Json(v).into_response(),
        Ok(Err(e)) => error_response(status_for(&e), e.to_string()),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn route(State(state): State<Arc<ServiceState>>, body: Bytes) -> Response {
    match parse(&body) {
        Ok(q) => blocking(state, move |s| s.route(&q)).await,
        Err(r) => r,
    }
}

async fn answer(State(state): State<Arc<ServiceState>>, body: Bytes) -> Response {
    match parse(&body) {
        Ok(q) => blocking(state, move |s| s.answer(&q)).await,
        Err(r) => r,
    }
}

async fn healthz() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

pub fn app(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/route", post(route))
        .route("/answer", post(answer))
        .route("/healthz", get(healthz))
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(state: Arc<ServiceState>, addr: SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::Config(format!("cannot bind {addr}: {e}")))?;
    log::info!("listening on {}", listener.local_addr().map_err(|e| Error::Config(e.to_string()))?);
    axum::serve(listener, app(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::Config(format!("server error: {e}")))
}

/// Starts the service on a background thread; returns the bound address.
pub fn spawn(state: Arc<ServiceState>, addr: SocketAddr) -> Result<SocketAddr> {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
            Ok(rt) => rt,
            Err(e) => {
                let _ = tx.send(Err(Error::Config(e.to_string())));
                return;
            }
        };
        rt.block_on(async move {
            let listener = match tokio::net::TcpListener::bind(addr).await {
                Ok(l) => l,
                Err(e) => {
                    let _ = tx.send(Err(Error::Config(format!("cannot bind {addr}: {e}"))));
                    return;
                }
            };
            let _ = tx.send(listener.local_addr().map_err(|e| Error::Config(e.to_string())));
            let _ = axum::serve(listener, app(state)).await;
        });
    });
    rx.recv().map_err(|e| Error::Config(e.to_string()))?
}
