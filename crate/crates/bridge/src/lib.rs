//! Live bridge between a running shared-control session and remote clients
//! over WebSocket. The first client to connect drives the leader arm; any
//! later client only watches.

pub mod client;
pub mod protocol;
pub mod server;

pub use client::{BridgeClient, ClientError};
pub use protocol::{
    ClientMessage, DecodeError, GridFrame, GridFull, InputAck, InputMessage, Keys, LeaderInput, ServerMessage,
    StateMessage, DEFAULT_PORT, PROTOCOL_SCHEMA_VERSION,
};
pub use server::{serve, BridgeHandle, Pace, ServeOptions, ServerStats};
