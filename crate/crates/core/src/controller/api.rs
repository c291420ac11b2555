//! HTTP control API.
//!
//! | method | path | body / query | response |
//! |---|---|---|---|
//! | POST | `/v1/experiments` | experiment config (JSON) | `{"id": ...}` |
//! | GET | `/v1/experiments` | | list of status reports |
//! | GET | `/v1/experiments/{id}` | | status report |
//! | POST | `/v1/experiments/{id}/stop` | | `{"killed": n, "status": report}` |
//! | GET | `/v1/experiments/{id}/logs` | `follow`, `since_seq` | NDJSON log records |
//! | GET | `/v1/cluster/status` | | cluster status report |
//! | GET | `/v1/events` | `since`, `wait_ms` | `{"events": [...], "last_seq": n}` |
//!
//! `since_seq` is exclusive: the stream resumes after the record whose `offset` was given.
//! Errors are `{"error": message, "kind": kind}` with a 4xx status for caller mistakes and
//! 5xx otherwise. Creating an experiment is not idempotent; every other call may be retried.

use std::collections::VecDeque;
use std::convert::Infallible;
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::watch;

use crate::error::Error;
use crate::ids::ExperimentId;
use crate::store::LogRecord;

use super::driver::Controller;
use super::engine::Event;
use super::report::StatusReport;
use super::ExperimentConfig;

/// Longest a single events long-poll may be held open.
const MAX_WAIT_MS: u64 = 30_000;

pub const LOGS_UNAVAILABLE: &str = "logs unavailable: cluster destroyed";

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

pub fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::NotFound { .. } => "not_found",
        Error::Validation { .. } => "validation",
        Error::QuotaExceeded { .. } => "quota",
        Error::Conflict(_) => "conflict",
        Error::Rejected(_) => "rejected",
        Error::Exhausted(_) => "exhausted",
        Error::NotADirectory(_) => "not_a_directory",
        Error::Io { .. } => "io",
        Error::Corrupt { .. } => "corrupt",
        Error::Internal(_) => "internal",
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            Error::NotFound { .. } => StatusCode::NOT_FOUND,
            Error::Validation { .. } | Error::NotADirectory(_) => StatusCode::BAD_REQUEST,
            Error::QuotaExceeded { .. } | Error::Conflict(_) => StatusCode::CONFLICT,
            Error::Rejected(_) | Error::Exhausted(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = json!({"error": self.0.to_string(), "kind": error_kind(&self.0)});
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub id: ExperimentId,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Stopped {
    pub killed: u64,
    pub status: StatusReport,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EventBatch {
    pub events: Vec<Event>,
    pub last_seq: u64,
}

pub fn router(controller: Controller) -> Router {
    Router::new()
        .route("/v1/experiments", post(create).get(list))
        .route("/v1/experiments/{id}", get(status))
        .route("/v1/experiments/{id}/stop", post(stop))
        .route("/v1/experiments/{id}/logs", get(logs))
        .route("/v1/cluster/status", get(cluster_status))
        .route("/v1/events", get(events))
        .with_state(controller)
}

async fn create(
    State(ctl): State<Controller>,
    Json(config): Json<ExperimentConfig>,
) -> ApiResult<(StatusCode, Json<Created>)> {
    let id = ctl.create_experiment(&config)?;
    Ok((StatusCode::CREATED, Json(Created { id })))
}

async fn list(State(ctl): State<Controller>) -> ApiResult<Json<Vec<StatusReport>>> {
    Ok(Json(ctl.list()?))
}

async fn status(
    State(ctl): State<Controller>,
    Path(id): Path<String>,
) -> ApiResult<Json<StatusReport>> {
    Ok(Json(ctl.status(&ExperimentId(id))?))
}

async fn stop(State(ctl): State<Controller>, Path(id): Path<String>) -> ApiResult<Json<Stopped>> {
    let id = ExperimentId(id);
    let outcome = ctl.stop_experiment(&id).await?;
    Ok(Json(Stopped {
        killed: outcome.killed,
        status: ctl.status(&id)?,
    }))
}

async fn cluster_status(State(ctl): State<Controller>) -> Json<super::ClusterStatusReport> {
    Json(ctl.cluster_status())
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    #[serde(default)]
    since: u64,
    #[serde(default)]
    wait_ms: u64,
}

async fn events(State(ctl): State<Controller>, Query(q): Query<EventsQuery>) -> Json<EventBatch> {
    let mut rx = ctl.subscribe();
    let deadline = tokio::time::Instant::now() + Duration::from_millis(q.wait_ms.min(MAX_WAIT_MS));
    loop {
        let events = ctl.events_since(q.since);
        if !events.is_empty() || tokio::time::Instant::now() >= deadline || ctl.is_closing() {
            let last_seq = events.last().map_or(ctl.last_event_seq(), |e| e.seq);
            return Json(EventBatch { events, last_seq });
        }
        tokio::select! {
            _ = rx.changed() => {}
            _ = tokio::time::sleep_until(deadline) => {}
        }
    }
}

#[derive(Debug, Deserialize)]
struct LogsQuery {
    /// Present without a value (`?follow`) means true.
    #[serde(default)]
    follow: Option<String>,
    #[serde(default)]
    since_seq: Option<u64>,
}

struct Tail {
    ctl: Controller,
    id: ExperimentId,
    cursor: Option<u64>,
    follow: bool,
    wake: watch::Receiver<u64>,
    pending: VecDeque<LogRecord>,
    done: bool,
}

fn ndjson(record: &LogRecord) -> Bytes {
    let mut line = serde_json::to_vec(record).expect("log records serialize");
    line.push(b'\n');
    Bytes::from(line)
}

async fn logs(
    State(ctl): State<Controller>,
    Path(id): Path<String>,
    Query(q): Query<LogsQuery>,
) -> ApiResult<Response> {
    let id = ExperimentId(id);
    let follow = q
        .follow
        .as_deref()
        .is_some_and(|v| !matches!(v, "false" | "0"));
    let ndjson_response =
        |body: Body| ([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response();
    if !ctl.serves(&id) {
        let record = ctl.root().load_experiment(&id)?;
        let cluster = &record.meta.cluster_name;
        if !ctl.root().cluster_exists(cluster) {
            return Ok((
                StatusCode::GONE,
                Json(json!({"error": LOGS_UNAVAILABLE, "kind": "logs_unavailable"})),
            )
                .into_response());
        }
        let records = ctl.root().read_logs(cluster, &id)?;
        let body: Vec<u8> = records
            .iter()
            .filter(|r| q.since_seq.is_none_or(|s| r.offset > s))
            .flat_map(|r| ndjson(r).to_vec())
            .collect();
        return Ok(ndjson_response(Body::from(body)));
    }
    let tail = Tail {
        wake: ctl.logs().subscribe(),
        ctl,
        id,
        cursor: q.since_seq,
        follow,
        pending: VecDeque::new(),
        done: false,
    };
    let stream = futures::stream::unfold(tail, |mut t| async move {
        loop {
            if let Some(r) = t.pending.pop_front() {
                t.cursor = Some(r.offset);
                return Some((Ok::<_, Infallible>(ndjson(&r)), t));
            }
            if t.done {
                return None;
            }
            // decide before reading, so lines written in between are still delivered
            let finished = !t.follow || t.ctl.drained(&t.id) || t.ctl.is_closing();
            match t.ctl.logs().since(&t.id, t.cursor) {
                Ok(records) => t.pending.extend(records),
                Err(e) => {
                    tracing::error!("log replay failed: {e}");
                    return None;
                }
            }
            if finished {
                t.done = true;
            } else if t.pending.is_empty() {
                tokio::select! {
                    _ = t.wake.changed() => {}
                    _ = tokio::time::sleep(Duration::from_millis(100)) => {}
                }
            }
        }
    });
    Ok(ndjson_response(Body::from_stream(stream)))
}
