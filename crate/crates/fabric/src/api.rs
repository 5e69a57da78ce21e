//! REST control surface.
//!
//! | method | path | effect |
//! |---|---|---|
//! | GET | `/qchannel/{channel}/{status}` | QKD device reports its quantum channel down (0) or up (1) |
//! | POST | `/qkey/{channel}` | body is a hex key to add to the channel's pool |
//! | GET | `/map` | the controller's network map as text |
//! | POST | `/fault/{link}` | body `cut`, `clear` or `add <db>` |
//! | GET | `/status/{channel}` | mode, route and pool level |
//! | GET | `/log` | every command issued so far |
//!
//! Success is 200 with a short text body. Malformed ids or bodies give 400,
//! unknown ids 404. With a token configured, requests must carry
//! `Authorization: Bearer <token>`.

use axum::extract::{Path, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use qfabric_core::net::{ChannelId, Fault, LinkId};

use crate::service::{ApiError, ServiceHandle};

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let code = match self {
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Gone => StatusCode::SERVICE_UNAVAILABLE,
        };
        (code, format!("{self}\n")).into_response()
    }
}

fn id(s: &str, what: &str) -> Result<u16, ApiError> {
    s.parse().map_err(|_| ApiError::BadRequest(format!("bad {what} id `{s}`")))
}

async fn qchannel(State(svc): State<ServiceHandle>, Path((ch, status)): Path<(String, String)>) -> Result<&'static str, ApiError> {
    let ch = ChannelId(id(&ch, "channel")?);
    let up = match status.as_str() {
        "0" => false,
        "1" => true,
        other => return Err(ApiError::BadRequest(format!("status must be 0 or 1, got `{other}`"))),
    };
    svc.qchannel_status(ch, up).await?;
    Ok("OK")
}

async fn qkey(State(svc): State<ServiceHandle>, Path(ch): Path<String>, body: String) -> Result<&'static str, ApiError> {
    let ch = ChannelId(id(&ch, "channel")?);
    svc.qkey(ch, body.trim().to_owned()).await?;
    Ok("OK")
}

async fn map(State(svc): State<ServiceHandle>) -> Result<String, ApiError> {
    svc.map().await
}

async fn fault(State(svc): State<ServiceHandle>, Path(link): Path<String>, body: String) -> Result<&'static str, ApiError> {
    let link = LinkId(id(&link, "link")?);
    let fault: Fault = body.parse().map_err(|e: qfabric_core::net::TopologyError| ApiError::BadRequest(e.to_string()))?;
    svc.fault(link, fault).await?;
    Ok("OK")
}

async fn status(State(svc): State<ServiceHandle>, Path(ch): Path<String>) -> Result<String, ApiError> {
    let ch = ChannelId(id(&ch, "channel")?);
    Ok(svc.channel(ch).await?.to_string())
}

async fn command_log(State(svc): State<ServiceHandle>) -> Result<String, ApiError> {
    svc.command_log().await
}

async fn check_token(State(token): State<String>, req: Request, next: Next) -> Response {
    let given = req.headers().get(header::AUTHORIZATION).and_then(|v| v.to_str().ok());
    if given.and_then(|v| v.strip_prefix("Bearer ")) == Some(token.as_str()) {
        next.run(req).await
    } else {
        (StatusCode::UNAUTHORIZED, "missing or wrong token\n").into_response()
    }
}

pub fn router(service: ServiceHandle, token: Option<String>) -> Router {
    let app = Router::new()
        .route("/qchannel/{channel}/{status}", get(qchannel))
        .route("/qkey/{channel}", post(qkey))
        .route("/map", get(map))
        .route("/fault/{link}", post(fault))
        .route("/status/{channel}", get(status))
        .route("/log", get(command_log))
        .with_state(service);
    match token {
        Some(t) => app.layer(middleware::from_fn_with_state(t, check_token)),
        None => app,
    }
}
