//! Editor, thinker and scorer roles.
//!
//! Two families implement them: [`remote`] clients that talk HTTP to real
//! models, and the [`sim`] world, a deterministic vector-valued stand-in used
//! to verify the whole system offline.

pub mod image;
pub mod remote;
pub mod retry;
pub mod sim;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use self::image::{ImageError, ImagePayload, ImageRef};
pub use self::retry::{with_retry, RetryPolicy, Retryable};

/// Default pixel budget for images sent to remote models (1024 x 1024).
pub const DEFAULT_MAX_PIXELS: u64 = 1024 * 1024;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("backend timed out: {0}")]
    Timeout(String),
    #[error("backend rejected the request: {0}")]
    Rejected(String),
    #[error("payload too large: {0}")]
    PayloadTooLarge(String),
    #[error("unparseable response: {0}")]
    UnparseableResponse(String),
    #[error("backend configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

impl Retryable for BackendError {
    fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Unreachable(_) | BackendError::Timeout(_))
    }
}

/// What the thinker is asked to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThinkerMode {
    /// Tagged critique with semantic/quality scores and a refined instruction.
    #[default]
    Verdict,
    /// JSON stop/continue decision with an optional rewritten instruction.
    Expert,
}

/// Everything the thinker sees at one turn.
#[derive(Debug, Clone, Copy)]
pub struct ThinkRequest<'a> {
    pub source: &'a ImageRef,
    pub previous_edit: &'a ImageRef,
    pub original_instruction: &'a str,
    pub previous_instruction: &'a str,
}

pub trait Editor: Send + Sync {
    fn name(&self) -> &str;

    /// Upper bound on `width * height` of images sent to this editor.
    fn max_pixels(&self) -> u64 {
        DEFAULT_MAX_PIXELS
    }

    fn edit(&self, source: &ImageRef, instruction: &str, seed: u64) -> Result<ImageRef, BackendError>;
}

pub trait Thinker: Send + Sync {
    fn name(&self) -> &str;

    fn mode(&self) -> ThinkerMode;

    /// Raw model text. Parsing belongs to the caller.
    fn think(&self, request: &ThinkRequest<'_>) -> Result<String, BackendError>;
}

pub trait Scorer: Send + Sync {
    fn name(&self) -> &str;

    /// Judge score in `[0, 10]` for `edited` against the source and the
    /// original instruction.
    fn score(&self, source: &ImageRef, edited: &ImageRef, original_instruction: &str) -> Result<f64, BackendError>;
}

/// Shared handles to the three roles used by a session.
#[derive(Clone)]
pub struct Backends {
    pub editor: Arc<dyn Editor>,
    pub thinker: Arc<dyn Thinker>,
    pub scorer: Option<Arc<dyn Scorer>>,
}

impl Backends {
    pub fn new(editor: Arc<dyn Editor>, thinker: Arc<dyn Thinker>, scorer: Option<Arc<dyn Scorer>>) -> Self {
        Backends {
            editor,
            thinker,
            scorer,
        }
    }

    pub fn scorer_name(&self) -> Option<String> {
        self.scorer.as_ref().map(|s| s.name().to_string())
    }
}

impl std::fmt::Debug for Backends {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backends")
            .field("editor", &self.editor.name())
            .field("thinker", &self.thinker.name())
            .field("scorer", &self.scorer.as_ref().map(|s| s.name().to_string()))
            .finish()
    }
}
