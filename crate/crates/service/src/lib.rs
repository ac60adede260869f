//! Live study sessions: the fixed protocol as an event-sourced state machine,
//! durable event storage, and the HTTP interface the study UI talks to.

pub mod error;
pub mod events;
pub mod http;
pub mod protocol;
pub mod service;
pub mod session;
pub mod store;

pub use error::{ServiceError, ServiceResult};
pub use service::{Clock, CreateSession, ManualClock, Service, ServiceConfig, SessionInfo, SystemClock};
pub use store::{EventStore, FileStore, MemoryStore};
