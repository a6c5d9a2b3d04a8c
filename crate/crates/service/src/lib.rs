//! HTTP hosting for human-annotated comparison sessions.

pub mod api;
pub mod embed;
pub mod store;

pub use api::{router, serve, AppState};
pub use embed::{EmbedClient, EmbedError};
pub use store::{Store, StoreError};
