//! Length-prefixed JSON frames: a 4-byte big-endian body length followed by
//! a UTF-8 JSON object whose `type` is `job`, `report`, `hb`, or `error`.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{JobReport, JobRequest};

/// Upper bound on a single frame body accepted by either side.
pub const MAX_FRAME_BYTES: usize = 256 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Frame {
    #[serde(rename = "job")]
    Job {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        job_id: Option<u64>,
        #[serde(flatten)]
        request: JobRequest,
    },
    #[serde(rename = "report")]
    Report {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        job_id: Option<u64>,
        #[serde(flatten)]
        report: JobReport,
    },
    #[serde(rename = "hb")]
    Heartbeat,
    #[serde(rename = "error")]
    Error { code: String, message: String },
}

impl Frame {
    pub fn error(code: &str, message: impl Into<String>) -> Self {
        Frame::Error {
            code: code.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("stream ended inside a frame")]
    Truncated,
    #[error("frame of {0} bytes exceeds the limit")]
    TooLarge(usize),
    #[error("malformed frame body: {0}")]
    Malformed(String),
}

pub fn encode_frame(frame: &Frame) -> Vec<u8> {
    let body = serde_json::to_vec(frame).expect("frames serialize");
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

pub fn write_frame<W: Write + ?Sized>(w: &mut W, frame: &Frame) -> io::Result<()> {
    w.write_all(&encode_frame(frame))?;
    w.flush()
}

pub fn decode_body(body: &[u8]) -> Result<Frame, FrameError> {
    serde_json::from_slice(body).map_err(|e| FrameError::Malformed(e.to_string()))
}

/// Blocking read of one frame. `Ok(None)` means the stream closed cleanly
/// between frames.
pub fn read_frame<R: Read + ?Sized>(r: &mut R, max_bytes: usize) -> Result<Option<Frame>, FrameError> {
    let mut header = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match r.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(FrameError::Truncated),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(header) as usize;
    if len > max_bytes {
        return Err(FrameError::TooLarge(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => FrameError::Truncated,
        _ => FrameError::Io(e),
    })?;
    decode_body(&body).map(Some)
}

/// Incremental frame splitter for a byte stream that may stall or carry
/// garbage. It only splits; the caller decides what a stall means.
#[derive(Debug, Default)]
pub struct FrameBuffer {
    buf: Vec<u8>,
}

impl FrameBuffer {
    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn clear(&mut self) {
        self.buf.clear();
    }

    /// Declared length of the pending frame, once its header has arrived.
    pub fn pending_len(&self) -> Option<usize> {
        (self.buf.len() >= 4)
            .then(|| u32::from_be_bytes([self.buf[0], self.buf[1], self.buf[2], self.buf[3]]) as usize)
    }

    /// Removes and returns the next complete frame body.
    pub fn take_body(&mut self) -> Option<Vec<u8>> {
        let len = self.pending_len()?;
        if self.buf.len() < 4 + len {
            return None;
        }
        let body = self.buf[4..4 + len].to_vec();
        self.buf.drain(..4 + len);
        Some(body)
    }
}
