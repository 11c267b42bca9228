//! Event-sourced co-design service: projects, sessions and the HTTP API.

pub mod demo;
pub mod error;
pub mod events;
pub mod http;
pub mod service;
pub mod state;

pub use error::{ApiError, GatewayError};
pub use events::{Event, EventLog, EventPayload};
pub use service::{BackendMode, BackendSuite, Gateway, GatewayConfig, WriteOptions};
pub use state::{ProjectState, TrainCache};
