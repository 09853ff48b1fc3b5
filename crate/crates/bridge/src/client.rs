//! Blocking client, used by the tests and handy for scripted drivers.

use std::net::{TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use thiserror::Error;
use tungstenite::{Message, WebSocket};

use crate::protocol::{
    decode_server, encode_client, ClientMessage, DecodeError, InputMessage, Keys, LeaderInput, ServerMessage,
    StateMessage, PROTOCOL_SCHEMA_VERSION,
};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Ws(#[from] tungstenite::Error),
    #[error("handshake: {0}")]
    Handshake(String),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("server closed the connection")]
    Closed,
    #[error("expected a welcome, got {0:?}")]
    NoWelcome(Box<ServerMessage>),
}

pub struct BridgeClient {
    ws: WebSocket<TcpStream>,
    role: String,
    seq: u64,
    last_heartbeat: Instant,
}

fn is_timeout(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io) if matches!(io.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut))
}

impl BridgeClient {
    /// Connects and waits for the welcome message.
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, ClientError> {
        let stream = TcpStream::connect(addr)?;
        let peer = stream.peer_addr()?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(Duration::from_secs(5)))?;
        let (ws, _) = tungstenite::client(format!("ws://{peer}/"), stream).map_err(|e| ClientError::Handshake(e.to_string()))?;
        let mut c = Self {
            ws,
            role: String::new(),
            seq: 0,
            last_heartbeat: Instant::now(),
        };
        match c.recv(Duration::from_secs(5))? {
            Some(ServerMessage::Welcome { role, .. }) => c.role = role,
            Some(other) => return Err(ClientError::NoWelcome(Box::new(other))),
            None => return Err(ClientError::Closed),
        }
        Ok(c)
    }

    /// `operator` or `observer`.
    pub fn role(&self) -> &str {
        &self.role
    }

    /// Last sequence number sent.
    pub fn seq(&self) -> u64 {
        self.seq
    }

    /// Sends the next input and returns its sequence number.
    pub fn send_input(&mut self, leader: LeaderInput, keys: Keys) -> Result<u64, ClientError> {
        self.seq += 1;
        let seq = self.seq;
        self.send_input_with_seq(seq, leader, keys)?;
        Ok(seq)
    }

    /// Sends an input with an explicit sequence number, stale or not.
    pub fn send_input_with_seq(&mut self, seq: u64, leader: LeaderInput, keys: Keys) -> Result<(), ClientError> {
        let m = ClientMessage::Input(InputMessage {
            schema_version: PROTOCOL_SCHEMA_VERSION,
            seq,
            leader,
            keys,
        });
        self.send_text(&encode_client(&m))
    }

    pub fn send_text(&mut self, text: &str) -> Result<(), ClientError> {
        self.ws.send(Message::text(text))?;
        Ok(())
    }

    pub fn heartbeat(&mut self) -> Result<(), ClientError> {
        self.last_heartbeat = Instant::now();
        let m = ClientMessage::Heartbeat {
            schema_version: PROTOCOL_SCHEMA_VERSION,
        };
        self.send_text(&encode_client(&m))
    }

    /// Next server message, or None on timeout. Keeps the connection alive
    /// with heartbeats while waiting.
    pub fn recv(&mut self, timeout: Duration) -> Result<Option<ServerMessage>, ClientError> {
        let deadline = Instant::now() + timeout;
        loop {
            if self.last_heartbeat.elapsed() >= Duration::from_secs(1) {
                self.heartbeat()?;
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Ok(None);
            }
            self.ws
                .get_ref()
                .set_read_timeout(Some(left.min(Duration::from_millis(200))))?;
            match self.ws.read() {
                Ok(Message::Text(t)) => return Ok(Some(decode_server(t.as_str())?)),
                Ok(Message::Close(_)) => return Err(ClientError::Closed),
                Ok(_) => {}
                Err(e) if is_timeout(&e) => {}
                Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => {
                    return Err(ClientError::Closed)
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// Next state message, skipping anything else.
    pub fn recv_state(&mut self, timeout: Duration) -> Result<Option<StateMessage>, ClientError> {
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.recv(left)? {
                Some(ServerMessage::State(s)) => return Ok(Some(s)),
                Some(_) => {}
                None => return Ok(None),
            }
        }
    }

    pub fn close(mut self) {
        let _ = self.ws.close(None);
        let _ = self.ws.flush();
    }
}
