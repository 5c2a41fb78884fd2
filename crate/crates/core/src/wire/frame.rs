//! Frame layout (all integers little-endian):
//!
//! ```text
//! header   magic "COV1" | msg_type u8 | payload_len u32
//! type 1   request_id u64 | mode u8 | (mode 0: sample_index u64 | mode 1: len u32, bytes)
//!          | k u8 | k x class u32
//! type 2   request_id u64 | predicted_class u32 | card u8 | card x partition u16
//!          | server_latency_us u32
//! type 3   request_id u64 | code u16 | len u16 | utf-8 message
//! ```

use std::io::{self, Read, Write};

use crate::error::{Error, Result};
use crate::partition::DomainSet;

pub const MAGIC: [u8; 4] = *b"COV1";
pub const HEADER_LEN: usize = 9;
/// Upper bound on payloads accepted from the network.
pub const MAX_PAYLOAD: u32 = 64 << 20;

pub const MSG_REQUEST: u8 = 1;
pub const MSG_RESPONSE: u8 = 2;
pub const MSG_ERROR: u8 = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RequestBody {
    /// Row of the server's traces.
    TraceIndex(u64),
    /// Opaque input for a live backend.
    Payload(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OffloadRequest {
    pub request_id: u64,
    pub body: RequestBody,
    pub topk: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OffloadResponse {
    pub request_id: u64,
    pub predicted_class: u32,
    pub domain: DomainSet,
    pub server_latency_us: u32,
}

/// Registered error codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum ErrorCode {
    BadFrame = 1,
    UnknownSample = 2,
    NoExpert = 3,
    Internal = 4,
}

impl ErrorCode {
    pub fn from_u16(v: u16) -> Option<Self> {
        match v {
            1 => Some(ErrorCode::BadFrame),
            2 => Some(ErrorCode::UnknownSample),
            3 => Some(ErrorCode::NoExpert),
            4 => Some(ErrorCode::Internal),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorMsg {
    pub request_id: u64,
    pub code: ErrorCode,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Request(OffloadRequest),
    Response(OffloadResponse),
    Error(ErrorMsg),
}

impl Message {
    pub fn request_id(&self) -> u64 {
        match self {
            Message::Request(r) => r.request_id,
            Message::Response(r) => r.request_id,
            Message::Error(e) => e.request_id,
        }
    }

    fn msg_type(&self) -> u8 {
        match self {
            Message::Request(_) => MSG_REQUEST,
            Message::Response(_) => MSG_RESPONSE,
            Message::Error(_) => MSG_ERROR,
        }
    }
}

fn encode_err(reason: impl Into<String>) -> Error {
    Error::Frame {
        offset: 0,
        reason: reason.into(),
    }
}

fn encode_payload(msg: &Message, out: &mut Vec<u8>) -> Result<()> {
    match msg {
        Message::Request(r) => {
            if r.topk.is_empty() || r.topk.len() > u8::MAX as usize {
                return Err(encode_err(format!("k={} outside [1, 255]", r.topk.len())));
            }
            out.extend_from_slice(&r.request_id.to_le_bytes());
            match &r.body {
                RequestBody::TraceIndex(i) => {
                    out.push(0);
                    out.extend_from_slice(&i.to_le_bytes());
                }
                RequestBody::Payload(bytes) => {
                    let len = u32::try_from(bytes.len())
                        .ok()
                        .filter(|&l| l <= MAX_PAYLOAD)
                        .ok_or_else(|| encode_err("raw payload too large"))?;
                    out.push(1);
                    out.extend_from_slice(&len.to_le_bytes());
                    out.extend_from_slice(bytes);
                }
            }
            out.push(r.topk.len() as u8);
            for c in &r.topk {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        Message::Response(r) => {
            let parts = r.domain.indices();
            if parts.len() > u8::MAX as usize {
                return Err(encode_err("domain too large"));
            }
            out.extend_from_slice(&r.request_id.to_le_bytes());
            out.extend_from_slice(&r.predicted_class.to_le_bytes());
            out.push(parts.len() as u8);
            for p in parts {
                out.extend_from_slice(&p.to_le_bytes());
            }
            out.extend_from_slice(&r.server_latency_us.to_le_bytes());
        }
        Message::Error(e) => {
            let text = e.message.as_bytes();
            let mut len = text.len().min(u16::MAX as usize);
            while !e.message.is_char_boundary(len) {
                len -= 1;
            }
            out.extend_from_slice(&e.request_id.to_le_bytes());
            out.extend_from_slice(&(e.code as u16).to_le_bytes());
            out.extend_from_slice(&(len as u16).to_le_bytes());
            out.extend_from_slice(&text[..len]);
        }
    }
    Ok(())
}

/// Serializes a message into one frame. Error messages longer than 65535
/// bytes are truncated at a character boundary.
pub fn encode(msg: &Message) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(64);
    out.extend_from_slice(&MAGIC);
    out.push(msg.msg_type());
    out.extend_from_slice(&[0; 4]);
    encode_payload(msg, &mut out)?;
    let len = (out.len() - HEADER_LEN) as u32;
    out[5..9].copy_from_slice(&len.to_le_bytes());
    Ok(out)
}

/// Little-endian cursor that reports absolute frame offsets.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Frame {
            offset: self.base + self.pos,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Header fields, after checking magic and type.
pub fn decode_header(header: &[u8; HEADER_LEN]) -> Result<(u8, u32)> {
    if header[..4] != MAGIC {
        return Err(Error::Frame {
            offset: 0,
            reason: format!("bad magic {:?}", String::from_utf8_lossy(&header[..4])),
        });
    }
    let msg_type = header[4];
    if !(MSG_REQUEST..=MSG_ERROR).contains(&msg_type) {
        return Err(Error::Frame {
            offset: 4,
            reason: format!("unknown message type {msg_type}"),
        });
    }
    let len = u32::from_le_bytes(header[5..9].try_into().unwrap());
    if len > MAX_PAYLOAD {
        return Err(Error::Frame {
            offset: 5,
            reason: format!("payload length {len} exceeds limit {MAX_PAYLOAD}"),
        });
    }
    Ok((msg_type, len))
}

/// Parses a payload of the given type. Offsets in errors count from the
/// start of the frame.
pub fn decode_payload(msg_type: u8, payload: &[u8]) -> Result<Message> {
    let mut c = Cursor {
        buf: payload,
        pos: 0,
        base: HEADER_LEN,
    };
    let msg = match msg_type {
        MSG_REQUEST => {
            let request_id = c.u64("request_id")?;
            let body = match c.u8("mode")? {
                0 => RequestBody::TraceIndex(c.u64("sample_index")?),
                1 => {
                    let len = c.u32("payload length")? as usize;
                    RequestBody::Payload(c.take(len, "raw payload")?.to_vec())
                }
                m => {
                    c.pos -= 1;
                    return Err(c.err(format!("unknown request mode {m}")));
                }
            };
            let k = c.u8("k")?;
            if k == 0 {
                c.pos -= 1;
                return Err(c.err("k must be at least 1"));
            }
            let topk = (0..k)
                .map(|_| c.u32("top-k class"))
                .collect::<Result<Vec<_>>>()?;
            Message::Request(OffloadRequest {
                request_id,
                body,
                topk,
            })
        }
        MSG_RESPONSE => {
            let request_id = c.u64("request_id")?;
            let predicted_class = c.u32("predicted_class")?;
            let card_pos = c.pos;
            let card = c.u8("domain cardinality")?;
            let parts = (0..card)
                .map(|_| c.u16("domain partition"))
                .collect::<Result<Vec<_>>>()?;
            let strictly_ascending = parts.windows(2).all(|w| w[0] < w[1]);
            if parts.is_empty() || parts.contains(&0) || !strictly_ascending {
                return Err(Error::Frame {
                    offset: HEADER_LEN + card_pos,
                    reason: format!("domain {parts:?} is not a non-empty ascending set of 1-based partitions"),
                });
            }
            let domain = DomainSet::new(parts).expect("checked above");
            let server_latency_us = c.u32("server_latency_us")?;
            Message::Response(OffloadResponse {
                request_id,
                predicted_class,
                domain,
                server_latency_us,
            })
        }
        MSG_ERROR => {
            let request_id = c.u64("request_id")?;
            let code_raw = c.u16("error code")?;
            let code = ErrorCode::from_u16(code_raw).ok_or_else(|| {
                c.pos -= 2;
                c.err(format!("unregistered error code {code_raw}"))
            })?;
            let len = c.u16("message length")? as usize;
            let start = c.pos;
            let text = c.take(len, "message")?;
            let message = String::from_utf8(text.to_vec()).map_err(|e| Error::Frame {
                offset: HEADER_LEN + start + e.utf8_error().valid_up_to(),
                reason: "message is not valid utf-8".into(),
            })?;
            Message::Error(ErrorMsg {
                request_id,
                code,
                message,
            })
        }
        t => {
            return Err(Error::Frame {
                offset: 4,
                reason: format!("unknown message type {t}"),
            })
        }
    };
    if c.pos != payload.len() {
        return Err(c.err(format!("{} trailing bytes", payload.len() - c.pos)));
    }
    Ok(msg)
}

/// Parses exactly one frame; any byte beyond it is an error.
pub fn decode(bytes: &[u8]) -> Result<Message> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Frame {
            offset: bytes.len(),
            reason: format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()),
        });
    }
    let header: &[u8; HEADER_LEN] = bytes[..HEADER_LEN].try_into().unwrap();
    let (msg_type, len) = decode_header(header)?;
    let body = &bytes[HEADER_LEN..];
    let len = len as usize;
    if body.len() < len {
        return Err(Error::Frame {
            offset: bytes.len(),
            reason: format!("truncated payload: {} of {len} bytes", body.len()),
        });
    }
    if body.len() > len {
        return Err(Error::Frame {
            offset: HEADER_LEN + len,
            reason: format!("{} trailing bytes after frame", body.len() - len),
        });
    }
    decode_payload(msg_type, body)
}

/// Reads one frame from a stream. `Ok(None)` on clean end of stream before
/// any header byte.
pub fn read_message(r: &mut impl Read) -> Result<Option<Message>> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => {
                return Err(Error::Frame {
                    offset: got,
                    reason: "connection closed inside header".into(),
                })
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let (msg_type, len) = decode_header(&header)?;
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            Error::Frame {
                offset: HEADER_LEN,
                reason: format!("connection closed inside a {len}-byte payload"),
            }
        } else {
            e.into()
        }
    })?;
    decode_payload(msg_type, &payload).map(Some)
}

pub fn write_message(w: &mut impl Write, msg: &Message) -> Result<()> {
    w.write_all(&encode(msg)?)?;
    Ok(())
}
