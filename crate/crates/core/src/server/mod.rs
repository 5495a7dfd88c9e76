//! The music service and its TCP front end.

mod cache;
mod protocol;
mod service;
mod tcp;

pub use cache::{PieceCache, QueueStatus};
pub use protocol::{Ack, ErrorCode, ErrorMessage, GameEventMessage, MusicRequest, MusicResponse, WireMessage};
pub use service::{MusicService, ServerConfig, Session, Stats};
pub use tcp::{serve, ServerHandle, DEFAULT_PORT};

use thiserror::Error;

use crate::strategy::Violation;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ServerError {
    #[error("server config: {0}")]
    Config(String),
    #[error(transparent)]
    Registry(#[from] Violation),
    #[error("warmup failed for strategy {strategy:?}: {reason}")]
    Warmup { strategy: String, reason: String },
}
