//! Aggregator/collaborator message set and its binary framing.
//!
//! Every message travels as one frame:
//!
//! ```text
//! +--------+----------+-------------+-----------------+
//! | "OFL1" | msg_type | body_len BE | body            |
//! | 4 B    | 1 B      | 4 B         | body_len bytes  |
//! +--------+----------+-------------+-----------------+
//! ```
//!
//! Integers in bodies are big-endian, strings are `u32` length-prefixed
//! UTF-8, and tensor payloads are raw little-endian `f32`. The field order of
//! every body is fixed; see `docs/protocol.md` for the bit-level layout.

mod codec;
pub mod tls;

use std::fmt;
use std::io::{self, Read, Write};

use crate::plan::PlanHash;
use crate::tensorstore::{NamedTensor, TensorKey};

pub use codec::{decode, decode_body, encode};
pub use tls::{
    serve, CallError, ClientTls, Direction, Endpoint, FrameTap, Handler, PeerInfo, RetryPolicy, ServerHandle,
    TlsClient,
};

pub const MAGIC: [u8; 4] = *b"OFL1";
pub const HEADER_LEN: usize = 9;
/// Upper bound on `body_len`.
pub const MAX_BODY_LEN: u32 = 64 * 1024 * 1024;
pub const PROTOCOL_VERSION: u16 = 1;
pub const DEFAULT_PORT: u16 = 50051;

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("frame truncated")]
    Truncated,
    #[error("bad frame magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("frame body of {0} bytes exceeds the 64 MiB limit")]
    Oversize(u32),
    #[error("malformed body: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageType {
    GetTasksRequest = 1,
    GetTasksResponse = 2,
    GetTensorRequest = 3,
    GetTensorResponse = 4,
    SendResultsRequest = 5,
    SendResultsAck = 6,
    ErrorResponse = 7,
}

impl TryFrom<u8> for MessageType {
    type Error = WireError;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        Ok(match value {
            1 => MessageType::GetTasksRequest,
            2 => MessageType::GetTasksResponse,
            3 => MessageType::GetTensorRequest,
            4 => MessageType::GetTensorResponse,
            5 => MessageType::SendResultsRequest,
            6 => MessageType::SendResultsAck,
            7 => MessageType::ErrorResponse,
            other => return Err(WireError::UnknownType(other)),
        })
    }
}

/// Registry of application-level error codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorCode {
    Malformed,
    UnknownCollaborator,
    IdentityMismatch,
    TensorNotFound,
    PlanHashMismatch,
    FederationOver,
    DuplicateResult,
}

impl ErrorCode {
    pub fn code(self) -> u16 {
        match self {
            ErrorCode::Malformed => 400,
            ErrorCode::UnknownCollaborator => 401,
            ErrorCode::IdentityMismatch => 403,
            ErrorCode::TensorNotFound => 404,
            ErrorCode::PlanHashMismatch => 409,
            ErrorCode::FederationOver => 410,
            ErrorCode::DuplicateResult => 429,
        }
    }

    pub fn from_code(code: u16) -> Option<Self> {
        Some(match code {
            400 => ErrorCode::Malformed,
            401 => ErrorCode::UnknownCollaborator,
            403 => ErrorCode::IdentityMismatch,
            404 => ErrorCode::TensorNotFound,
            409 => ErrorCode::PlanHashMismatch,
            410 => ErrorCode::FederationOver,
            429 => ErrorCode::DuplicateResult,
            _ => return None,
        })
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestHeader {
    pub sender_label: String,
    pub plan_hash: PlanHash,
    pub protocol_version: u16,
}

impl RequestHeader {
    pub fn new(sender_label: impl Into<String>, plan_hash: PlanHash) -> Self {
        RequestHeader {
            sender_label: sender_label.into(),
            plan_hash,
            protocol_version: PROTOCOL_VERSION,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GetTasksRequest {
    pub header: RequestHeader,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GetTasksResponse {
    pub round: u32,
    pub task_names: Vec<String>,
    pub sleep_seconds: u32,
    pub quit: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GetTensorRequest {
    pub header: RequestHeader,
    pub key: TensorKey,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GetTensorResponse {
    pub tensor: NamedTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SendResultsRequest {
    pub header: RequestHeader,
    pub round: u32,
    pub task_name: String,
    pub data_size: u64,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SendResultsAck {
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorResponse {
    pub code: u16,
    pub detail: String,
}

impl ErrorResponse {
    pub fn new(code: ErrorCode, detail: impl Into<String>) -> Self {
        ErrorResponse {
            code: code.code(),
            detail: detail.into(),
        }
    }

    pub fn kind(&self) -> Option<ErrorCode> {
        ErrorCode::from_code(self.code)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    GetTasksRequest(GetTasksRequest),
    GetTasksResponse(GetTasksResponse),
    GetTensorRequest(GetTensorRequest),
    GetTensorResponse(GetTensorResponse),
    SendResultsRequest(SendResultsRequest),
    SendResultsAck(SendResultsAck),
    ErrorResponse(ErrorResponse),
}

impl Message {
    pub fn message_type(&self) -> MessageType {
        match self {
            Message::GetTasksRequest(_) => MessageType::GetTasksRequest,
            Message::GetTasksResponse(_) => MessageType::GetTasksResponse,
            Message::GetTensorRequest(_) => MessageType::GetTensorRequest,
            Message::GetTensorResponse(_) => MessageType::GetTensorResponse,
            Message::SendResultsRequest(_) => MessageType::SendResultsRequest,
            Message::SendResultsAck(_) => MessageType::SendResultsAck,
            Message::ErrorResponse(_) => MessageType::ErrorResponse,
        }
    }

    pub fn header(&self) -> Option<&RequestHeader> {
        match self {
            Message::GetTasksRequest(m) => Some(&m.header),
            Message::GetTensorRequest(m) => Some(&m.header),
            Message::SendResultsRequest(m) => Some(&m.header),
            _ => None,
        }
    }

    pub fn error(code: ErrorCode, detail: impl Into<String>) -> Self {
        Message::ErrorResponse(ErrorResponse::new(code, detail))
    }
}

/// Reads exactly one frame. `Ok(None)` on a clean EOF before the first byte.
pub fn read_frame<R: Read>(reader: &mut R) -> Result<Option<Vec<u8>>, WireError> {
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match reader.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(WireError::Truncated),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let body_len = codec::check_header(&header)?.1;
    let mut frame = Vec::with_capacity(HEADER_LEN + body_len as usize);
    frame.extend_from_slice(&header);
    frame.resize(HEADER_LEN + body_len as usize, 0);
    reader.read_exact(&mut frame[HEADER_LEN..]).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            WireError::Truncated
        } else {
            WireError::Io(e)
        }
    })?;
    Ok(Some(frame))
}

pub fn write_frame<W: Write>(writer: &mut W, frame: &[u8]) -> io::Result<()> {
    writer.write_all(frame)?;
    writer.flush()
}
