//! Wire messages and their text encoding. Every message is one JSON object
//! carried in one WebSocket text frame; the `type` field names the variant.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use teleop_core::grid::OccupancyGrid;

pub const PROTOCOL_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_PORT: u16 = 8793;

/// Occupancy as the operator sees it: prior obstacles plus what the lidar
/// has found. Rows run north to south, one character per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFull {
    pub width: usize,
    pub height: usize,
    pub resolution: f64,
    pub origin: [f64; 3],
    pub rows: Vec<String>,
}

/// Cells discovered since the previous frame on this connection, as
/// `[x, y, class]` with class 1 = known, 2 = semi-known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridFrame {
    Full(GridFull),
    Delta { cells: Vec<[u32; 3]> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputAck {
    pub seq: u64,
    /// Tick counter when the server read the message.
    pub received_tick: u64,
    /// Tick whose step used it.
    pub applied_tick: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMessage {
    pub schema_version: u32,
    pub tick: u64,
    pub time: f64,
    pub mode: String,
    /// x, y, heading.
    pub base: [f64; 3],
    /// x, y, z, roll, pitch, yaw in the leader base frame.
    pub leader_pose: [f64; 6],
    /// Leader driving-axis offset from home (m).
    pub home_offset_d: f64,
    pub follower_q: [f64; 7],
    pub cue: [f64; 6],
    /// `inside_deadzone`, `active` or `beyond`.
    pub boundary: String,
    /// Leader locked or homing; input is ignored.
    pub inhibited: bool,
    /// World position of the object while the marker is in view.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub object: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub grid: Option<GridFrame>,
    #[serde(default)]
    pub notifications: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ack: Option<InputAck>,
    /// Stale inputs dropped so far.
    pub dropped_inputs: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub outcome: Option<String>,
}

/// Leader command carried by an input message.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LeaderInput {
    /// End-effector wrench (N, N·m) in the leader base frame.
    Wrench { value: [f64; 6] },
    /// Desired end-effector offset from home; the server turns it into a
    /// wrench with its configured stiffness.
    Displacement { value: [f64; 6] },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Keys {
    #[serde(default)]
    pub drop: bool,
    #[serde(default)]
    pub grasp: bool,
    #[serde(default)]
    pub manual_override: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputMessage {
    pub schema_version: u32,
    /// Strictly increasing per connection.
    pub seq: u64,
    pub leader: LeaderInput,
    #[serde(default)]
    pub keys: Keys,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Welcome {
        schema_version: u32,
        /// `operator` or `observer`.
        role: String,
    },
    State(StateMessage),
    Heartbeat {
        schema_version: u32,
        time: f64,
    },
    VersionError {
        expected: u32,
        found: u32,
    },
    Error {
        message: String,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        byte_offset: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Input(InputMessage),
    Heartbeat { schema_version: u32 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error("malformed message at byte {offset}: {message}")]
    Malformed { offset: usize, message: String },
    #[error("schema version {found} is not supported (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("non-finite number in message")]
    NonFinite,
}

impl DecodeError {
    pub fn reply(&self) -> ServerMessage {
        match self {
            DecodeError::Version { expected, found } => ServerMessage::VersionError {
                expected: *expected,
                found: *found,
            },
            DecodeError::Malformed { offset, message } => ServerMessage::Error {
                message: message.clone(),
                byte_offset: Some(*offset),
            },
            DecodeError::NonFinite => ServerMessage::Error {
                message: self.to_string(),
                byte_offset: None,
            },
        }
    }
}

/// Byte offset of a 1-based (line, column) position.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (start + column.saturating_sub(1)).min(text.len())
}

fn malformed(text: &str, e: &serde_json::Error) -> DecodeError {
    let offset = if e.is_eof() {
        text.len()
    } else {
        byte_offset(text, e.line(), e.column())
    };
    DecodeError::Malformed {
        offset,
        message: e.to_string(),
    }
}

/// Version field of an arbitrary message, if it has one.
fn version_of(v: &serde_json::Value) -> Option<u64> {
    v.get("schema_version")
        .or_else(|| v.as_object().and_then(|o| o.values().find_map(|x| x.get("schema_version"))))
        .and_then(|x| x.as_u64())
}

fn check_version(text: &str) -> Result<serde_json::Value, DecodeError> {
    let v: serde_json::Value = serde_json::from_str(text).map_err(|e| malformed(text, &e))?;
    if let Some(found) = version_of(&v) {
        if found != PROTOCOL_SCHEMA_VERSION as u64 {
            return Err(DecodeError::Version {
                expected: PROTOCOL_SCHEMA_VERSION,
                found: found.min(u32::MAX as u64) as u32,
            });
        }
    }
    Ok(v)
}

pub fn encode_client(m: &ClientMessage) -> String {
    serde_json::to_string(m).expect("messages serialize")
}

pub fn encode_server(m: &ServerMessage) -> String {
    serde_json::to_string(m).expect("messages serialize")
}

pub fn decode_client(text: &str) -> Result<ClientMessage, DecodeError> {
    check_version(text)?;
    let m: ClientMessage = serde_json::from_str(text).map_err(|e| malformed(text, &e))?;
    if let ClientMessage::Input(i) = &m {
        let v = match i.leader {
            LeaderInput::Wrench { value } | LeaderInput::Displacement { value } => value,
        };
        if !v.iter().all(|x| x.is_finite()) {
            return Err(DecodeError::NonFinite);
        }
    }
    Ok(m)
}

pub fn decode_server(text: &str) -> Result<ServerMessage, DecodeError> {
    check_version(text)?;
    serde_json::from_str(text).map_err(|e| malformed(text, &e))
}

/// Known obstacles and every discovered cell.
pub fn grid_full(grid: &OccupancyGrid) -> GridFull {
    use teleop_core::grid::{Cell, CellClass};
    let mut rows = Vec::with_capacity(grid.height());
    for y in (0..grid.height()).rev() {
        let row: String = (0..grid.width())
            .map(|x| {
                let c = Cell::new(x, y);
                match grid.class(c) {
                    CellClass::Known => '#',
                    CellClass::SemiKnown if grid.is_discovered(c) => 's',
                    _ => '.',
                }
            })
            .collect();
        rows.push(row);
    }
    let o = grid.origin();
    GridFull {
        width: grid.width(),
        height: grid.height(),
        resolution: grid.resolution(),
        origin: [o.x, o.y, o.gamma],
        rows,
    }
}
