//! Policy serving over a same-host shared-memory channel or framed TCP.
//!
//! A [`server`] hosts an [`agent::Agent`] behind a small binary protocol
//! ([`frame`], [`value`]). A [`client::PolicyClient`] negotiates the
//! transport at connect time and exposes `reset`/`act` in the agent's
//! shape. [`envloop`] drives environments against either, and [`bench`]
//! measures round-trip latency.

pub mod agent;
pub mod bench;
pub mod client;
pub mod envloop;
pub mod error;
pub mod fixtures;
pub mod frame;
pub mod golden;
pub mod image;
pub mod obs;
pub mod server;
pub mod transport;
pub mod value;

pub use agent::{Agent, AgentError, AgentFactory};
pub use client::{ConnectOptions, PolicyClient};
pub use error::{Error, Result};
pub use frame::{Flags, Frame, MsgType};
pub use image::CompressionPolicy;
pub use obs::{Act, Gripper, Obs};
pub use server::{serve, AgentSource, ServerConfig, ServerHandle};
pub use transport::TransportMode;
pub use value::{Map, NdArray, Value};
