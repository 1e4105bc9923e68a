//! Binary wire protocol between the central server and hospital clients.
//!
//! ```text
//! frame  = length u32 BE | msg_type u8 | payload[length] | crc32 u32 BE (msg_type + payload)
//! ```
//!
//! | type | message        | payload                                                    |
//! |------|----------------|------------------------------------------------------------|
//! | 0x01 | JOIN           | version u8, hospital_id u16 LE                             |
//! | 0x02 | GLOBAL_WEIGHTS | weight blob                                                |
//! | 0x03 | LOCAL_UPDATE   | weight blob, then tp, fp, tn, fn as u32 LE                 |
//! | 0x04 | ROUND_BEGIN    | round u32, increment u16, round_in_increment u16, rounds_per_increment u16 (LE) |
//! | 0x05 | ROUND_COMPLETE | empty                                                      |
//! | 0x06 | SHUTDOWN       | empty                                                      |
//! | 0x07 | ERROR          | UTF-8 message                                              |
//!
//! A weight blob is a CL3W file followed by sample_count u32, hospital_id u16
//! and round u16, all little-endian.

mod client;
mod server;

use std::io::{ErrorKind, Read, Write};

use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::nnkernel::{decode_cl3w, encode_cl3w, Mlp, CL3W_MAGIC};

pub use client::{run_client, run_client_with_increments, ClientOutcome};
pub use server::{CentralOptions, CentralOutcome, CentralServer, TranscriptEntry};

pub const PROTOCOL_VERSION: u8 = 1;
pub const DEFAULT_PORT: u16 = 7731;
pub const MAX_PAYLOAD: usize = 64 * 1024 * 1024;

pub const MSG_JOIN: u8 = 0x01;
pub const MSG_GLOBAL_WEIGHTS: u8 = 0x02;
pub const MSG_LOCAL_UPDATE: u8 = 0x03;
pub const MSG_ROUND_BEGIN: u8 = 0x04;
pub const MSG_ROUND_COMPLETE: u8 = 0x05;
pub const MSG_SHUTDOWN: u8 = 0x06;
pub const MSG_ERROR: u8 = 0x07;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightBlob {
    pub model: Mlp,
    pub sample_count: u32,
    pub hospital_id: u16,
    pub round: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundBegin {
    pub round: u32,
    pub increment: u16,
    pub round_in_increment: u16,
    pub rounds_per_increment: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Join {
        version: u8,
        hospital_id: u16,
    },
    GlobalWeights(WeightBlob),
    LocalUpdate {
        blob: WeightBlob,
        confusion: ConfusionMatrix,
    },
    RoundBegin(RoundBegin),
    RoundComplete,
    Shutdown,
    Error(String),
}

impl Message {
    pub fn msg_type(&self) -> u8 {
        match self {
            Message::Join { .. } => MSG_JOIN,
            Message::GlobalWeights(_) => MSG_GLOBAL_WEIGHTS,
            Message::LocalUpdate { .. } => MSG_LOCAL_UPDATE,
            Message::RoundBegin(_) => MSG_ROUND_BEGIN,
            Message::RoundComplete => MSG_ROUND_COMPLETE,
            Message::Shutdown => MSG_SHUTDOWN,
            Message::Error(_) => MSG_ERROR,
        }
    }

    fn payload(&self) -> Result<Vec<u8>> {
        let mut p = Vec::new();
        match self {
            Message::Join {
                version,
                hospital_id,
            } => {
                p.push(*version);
                p.extend_from_slice(&hospital_id.to_le_bytes());
            }
            Message::GlobalWeights(blob) => write_blob(&mut p, blob),
            Message::LocalUpdate { blob, confusion } => {
                write_blob(&mut p, blob);
                for v in [confusion.tp, confusion.fp, confusion.tn, confusion.fn_] {
                    let v = u32::try_from(v).map_err(|_| {
                        Error::Protocol(format!("confusion count {v} exceeds 32 bits"))
                    })?;
                    p.extend_from_slice(&v.to_le_bytes());
                }
            }
            Message::RoundBegin(rb) => {
                p.extend_from_slice(&rb.round.to_le_bytes());
                p.extend_from_slice(&rb.increment.to_le_bytes());
                p.extend_from_slice(&rb.round_in_increment.to_le_bytes());
                p.extend_from_slice(&rb.rounds_per_increment.to_le_bytes());
            }
            Message::RoundComplete | Message::Shutdown => {}
            Message::Error(text) => p.extend_from_slice(text.as_bytes()),
        }
        Ok(p)
    }

    fn from_parts(msg_type: u8, payload: &[u8]) -> Result<Self> {
        let mut r = Reader::new(payload);
        let msg = match msg_type {
            MSG_JOIN => Message::Join {
                version: r.u8()?,
                hospital_id: r.u16()?,
            },
            MSG_GLOBAL_WEIGHTS => Message::GlobalWeights(r.blob()?),
            MSG_LOCAL_UPDATE => {
                let blob = r.blob()?;
                let confusion = ConfusionMatrix {
                    tp: r.u32()? as u64,
                    fp: r.u32()? as u64,
                    tn: r.u32()? as u64,
                    fn_: r.u32()? as u64,
                };
                Message::LocalUpdate { blob, confusion }
            }
            MSG_ROUND_BEGIN => Message::RoundBegin(RoundBegin {
                round: r.u32()?,
                increment: r.u16()?,
                round_in_increment: r.u16()?,
                rounds_per_increment: r.u16()?,
            }),
            MSG_ROUND_COMPLETE => Message::RoundComplete,
            MSG_SHUTDOWN => Message::Shutdown,
            MSG_ERROR => {
                let text = std::str::from_utf8(r.take(r.rest().len())?)
                    .map_err(|_| Error::Protocol("ERROR payload is not UTF-8".into()))?;
                Message::Error(text.to_string())
            }
            other => {
                return Err(Error::Protocol(format!(
                    "unknown message type 0x{other:02x}"
                )))
            }
        };
        if !r.rest().is_empty() {
            return Err(Error::Protocol(format!(
                "{} trailing payload bytes in message 0x{msg_type:02x}",
                r.rest().len()
            )));
        }
        Ok(msg)
    }
}

fn write_blob(out: &mut Vec<u8>, blob: &WeightBlob) {
    out.extend_from_slice(&encode_cl3w(&blob.model));
    out.extend_from_slice(&blob.sample_count.to_le_bytes());
    out.extend_from_slice(&blob.hospital_id.to_le_bytes());
    out.extend_from_slice(&blob.round.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::Protocol("payload too short".into()));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn rest(&self) -> &'a [u8] {
        self.bytes
    }

    fn blob(&mut self) -> Result<WeightBlob> {
        let len = cl3w_len(self.bytes)?;
        let model = decode_cl3w(self.take(len)?)?;
        Ok(WeightBlob {
            model,
            sample_count: self.u32()?,
            hospital_id: self.u16()?,
            round: self.u16()?,
        })
    }
}

/// Length of the CL3W file at the start of `bytes`, read from its header.
fn cl3w_len(bytes: &[u8]) -> Result<usize> {
    let short = || Error::Protocol("truncated weight blob".into());
    if bytes.len() < 5 || &bytes[..4] != CL3W_MAGIC {
        return Err(Error::Protocol(
            "weight blob does not start with CL3W".into(),
        ));
    }
    let mut at = match bytes[4] {
        0x01 => 5,
        0x02 => 6,
        v => return Err(Error::WeightFormat(format!("unsupported version {v}"))),
    };
    let word = |at: usize| -> Result<u64> {
        let b = bytes.get(at..at + 4).ok_or_else(short)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as u64)
    };
    let layers = word(at)?;
    at += 4;
    let mut params = 0u64;
    for _ in 0..layers {
        let rows = word(at)?;
        let cols = word(at + 4)?;
        at += 8;
        params += rows * cols + cols;
    }
    let total = at as u64 + 8 * params + 4;
    if total > bytes.len() as u64 {
        return Err(short());
    }
    Ok(total as usize)
}

/// A frame as it travels on the wire.
pub fn encode_frame(msg: &Message) -> Result<Vec<u8>> {
    let payload = msg.payload()?;
    if payload.len() >= MAX_PAYLOAD {
        return Err(Error::Protocol(format!(
            "payload of {} bytes exceeds the 64 MiB limit",
            payload.len()
        )));
    }
    let mut out = Vec::with_capacity(payload.len() + 9);
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.push(msg.msg_type());
    out.extend_from_slice(&payload);
    let mut crc = crc32fast::Hasher::new();
    crc.update(&out[4..]);
    out.extend_from_slice(&crc.finalize().to_be_bytes());
    Ok(out)
}

/// Decodes exactly one frame; `bytes` must contain nothing else.
pub fn decode_frame(bytes: &[u8]) -> Result<Message> {
    if bytes.len() < 9 {
        return Err(Error::Protocol(format!(
            "truncated frame ({} bytes)",
            bytes.len()
        )));
    }
    let len = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
    if len >= MAX_PAYLOAD {
        return Err(Error::Protocol(format!(
            "declared payload {len} exceeds limit"
        )));
    }
    if bytes.len() != len + 9 {
        return Err(Error::Protocol(format!(
            "frame declares {len} payload bytes but is {} bytes long",
            bytes.len()
        )));
    }
    check_crc(&bytes[4..5 + len], &bytes[5 + len..])?;
    Message::from_parts(bytes[4], &bytes[5..5 + len])
}

fn check_crc(body: &[u8], tail: &[u8]) -> Result<()> {
    let expected = u32::from_be_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if expected != actual {
        return Err(Error::Protocol(format!(
            "frame CRC mismatch: stored {expected:08x}, computed {actual:08x}"
        )));
    }
    Ok(())
}

/// Reads one frame from a stream. `Ok(None)` on a clean end of stream at a
/// frame boundary. Returns the raw bytes along with the message.
pub fn read_frame(r: &mut impl Read) -> Result<Option<(Message, Vec<u8>)>> {
    let mut head = [0u8; 5];
    let mut got = 0;
    while got < head.len() {
        match r.read(&mut head[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::Protocol("truncated frame header".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(head[..4].try_into().unwrap()) as usize;
    if len >= MAX_PAYLOAD {
        return Err(Error::Protocol(format!(
            "declared payload {len} exceeds limit"
        )));
    }
    let mut raw = Vec::with_capacity(len + 9);
    raw.extend_from_slice(&head);
    raw.resize(len + 9, 0);
    r.read_exact(&mut raw[5..]).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::Protocol("truncated frame body".into()),
        _ => e.into(),
    })?;
    check_crc(&raw[4..5 + len], &raw[5 + len..])?;
    let msg = Message::from_parts(raw[4], &raw[5..5 + len])?;
    Ok(Some((msg, raw)))
}

/// Writes one frame and returns its bytes.
pub fn write_frame(w: &mut impl Write, msg: &Message) -> Result<Vec<u8>> {
    let bytes = encode_frame(msg)?;
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(bytes)
}
