use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] clickseg::Error),

    #[error("no model loaded")]
    NotReady,

    #[error("scene {0:?} not found")]
    SceneNotFound(String),

    #[error("scene has {points} points, limit is {max}")]
    TooLarge { points: usize, max: usize },

    #[error("bad request: {0}")]
    BadRequest(String),

    #[error("internal error: {0}")]
    Internal(String),
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        use clickseg::Error as E;
        match self {
            ServiceError::Core(e) => match e {
                E::NotFound(_) => StatusCode::NOT_FOUND,
                E::NothingToUndo => StatusCode::CONFLICT,
                E::EmptyScene
                | E::InvalidInput(_)
                | E::Parse { .. }
                | E::InvalidRegion { .. }
                | E::MissingRegion(_)
                | E::InvalidLabel { .. }
                | E::InvalidClick(_)
                | E::Json(_) => StatusCode::BAD_REQUEST,
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            },
            ServiceError::NotReady => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::SceneNotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::TooLarge { .. } => StatusCode::PAYLOAD_TOO_LARGE,
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    /// Stable machine-readable error name.
    pub fn kind(&self) -> &'static str {
        use clickseg::Error as E;
        match self {
            ServiceError::Core(e) => match e {
                E::NotFound(_) => "not_found",
                E::NothingToUndo => "nothing_to_undo",
                E::InvalidClick(_) => "invalid_click",
                E::InvalidRegion { .. } => "invalid_region",
                E::Parse { .. } => "parse_error",
                E::EmptyScene => "empty_scene",
                E::InvalidInput(_) | E::MissingRegion(_) | E::InvalidLabel { .. } | E::Json(_) => "invalid_input",
                _ => "internal",
            },
            ServiceError::NotReady => "not_ready",
            ServiceError::SceneNotFound(_) => "scene_not_found",
            ServiceError::TooLarge { .. } => "too_large",
            ServiceError::BadRequest(_) => "bad_request",
            ServiceError::Internal(_) => "internal",
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = json!({"error": self.kind(), "message": self.to_string()});
        (self.status(), Json(body)).into_response()
    }
}
