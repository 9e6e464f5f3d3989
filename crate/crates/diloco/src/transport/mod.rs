//! Framed binary protocol for coordinator↔worker exchange.
//!
//! Frame layout (little-endian):
//! magic "DLC1" (4) | msg_type (1) | worker_id (4) | outer_step (4) |
//! payload_len (8) | payload | crc32 (4, over header+payload).
//!
//! PARAMS and OUTER_GRAD frames carry the flat parameter vector as f64
//! (or f32 when the high bit of msg_type is set); an empty PARAMS payload
//! tells a worker it is dropped this round. JOIN carries the config hash,
//! SHUTDOWN an optional UTF-8 reason.

pub mod tcp;

use crate::numerics::ParamVector;
use std::io::{Read, Write};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"DLC1";
/// Non-payload bytes per frame: 21-byte header + 4-byte crc.
pub const FRAME_OVERHEAD: u64 = 25;
const HEADER_LEN: usize = 21;
const F32_FLAG: u8 = 0x80;
/// Upper bound accepted for incoming payloads (64 MiB ≈ an 8M-param model).
const MAX_PAYLOAD: u64 = 64 << 20;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unknown message type {0:#x}")]
    BadType(u8),
    #[error("crc mismatch (got {got:#010x}, want {want:#010x})")]
    BadCrc { got: u32, want: u32 },
    #[error("bad payload length {len} ({why})")]
    BadLength { len: u64, why: &'static str },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Handshake(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MsgKind {
    Join = 1,
    Params = 2,
    OuterGrad = 3,
    Ack = 4,
    Shutdown = 5,
}

impl MsgKind {
    fn from_byte(b: u8) -> Result<(MsgKind, bool), ProtocolError> {
        let wide = b & F32_FLAG != 0;
        let kind = match b & !F32_FLAG {
            1 => MsgKind::Join,
            2 => MsgKind::Params,
            3 => MsgKind::OuterGrad,
            4 => MsgKind::Ack,
            5 => MsgKind::Shutdown,
            _ => return Err(ProtocolError::BadType(b)),
        };
        Ok((kind, wide))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub kind: MsgKind,
    /// Payload reals are 32-bit on the wire.
    pub f32_payload: bool,
    pub worker_id: u32,
    pub outer_step: u32,
    pub payload: Vec<u8>,
}

impl Message {
    pub fn control(kind: MsgKind, worker_id: u32, outer_step: u32) -> Message {
        Message { kind, f32_payload: false, worker_id, outer_step, payload: Vec::new() }
    }

    /// PARAMS/OUTER_GRAD carrying a parameter vector.
    pub fn with_params(kind: MsgKind, worker_id: u32, outer_step: u32, v: &ParamVector, f32_payload: bool) -> Message {
        Message { kind, f32_payload, worker_id, outer_step, payload: encode_reals(v, f32_payload) }
    }

    pub fn params(&self) -> Result<ParamVector, ProtocolError> {
        decode_reals(&self.payload, self.f32_payload)
    }

    /// Total frame size of this message on the wire.
    pub fn frame_len(&self) -> u64 {
        FRAME_OVERHEAD + self.payload.len() as u64
    }
}

/// Wire size of a parameter-bearing frame for a model of `param_count`.
pub fn param_frame_len(param_count: usize, f32_payload: bool) -> u64 {
    FRAME_OVERHEAD + (if f32_payload { 4 } else { 8 }) * param_count as u64
}

pub fn encode_reals(v: &ParamVector, f32_payload: bool) -> Vec<u8> {
    if f32_payload {
        v.0.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect()
    } else {
        v.0.iter().flat_map(|&x| x.to_le_bytes()).collect()
    }
}

pub fn decode_reals(payload: &[u8], f32_payload: bool) -> Result<ParamVector, ProtocolError> {
    let width = if f32_payload { 4 } else { 8 };
    if payload.len() % width != 0 {
        return Err(ProtocolError::BadLength {
            len: payload.len() as u64,
            why: "payload is not a whole number of reals",
        });
    }
    let values = payload
        .chunks_exact(width)
        .map(|c| {
            if f32_payload {
                f32::from_le_bytes(c.try_into().unwrap()) as f64
            } else {
                f64::from_le_bytes(c.try_into().unwrap())
            }
        })
        .collect();
    Ok(ParamVector(values))
}

fn header_bytes(msg: &Message) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[0..4].copy_from_slice(&MAGIC);
    h[4] = msg.kind as u8 | if msg.f32_payload { F32_FLAG } else { 0 };
    h[5..9].copy_from_slice(&msg.worker_id.to_le_bytes());
    h[9..13].copy_from_slice(&msg.outer_step.to_le_bytes());
    h[13..21].copy_from_slice(&(msg.payload.len() as u64).to_le_bytes());
    h
}

pub fn encode_message(msg: &Message) -> Vec<u8> {
    let header = header_bytes(msg);
    let mut crc = crc32fast::Hasher::new();
    crc.update(&header);
    crc.update(&msg.payload);
    let mut frame = Vec::with_capacity(HEADER_LEN + msg.payload.len() + 4);
    frame.extend_from_slice(&header);
    frame.extend_from_slice(&msg.payload);
    frame.extend_from_slice(&crc.finalize().to_le_bytes());
    frame
}

/// Decode one complete frame. Rejects bad magic, unknown type, length
/// mismatch and crc failure.
pub fn decode_message(frame: &[u8]) -> Result<Message, ProtocolError> {
    if frame.len() < FRAME_OVERHEAD as usize {
        return Err(ProtocolError::BadLength { len: frame.len() as u64, why: "frame shorter than overhead" });
    }
    let magic: [u8; 4] = frame[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(ProtocolError::BadMagic(magic));
    }
    let (kind, f32_payload) = MsgKind::from_byte(frame[4])?;
    let worker_id = u32::from_le_bytes(frame[5..9].try_into().unwrap());
    let outer_step = u32::from_le_bytes(frame[9..13].try_into().unwrap());
    let payload_len = u64::from_le_bytes(frame[13..21].try_into().unwrap());
    if payload_len != (frame.len() - FRAME_OVERHEAD as usize) as u64 {
        return Err(ProtocolError::BadLength { len: payload_len, why: "payload_len disagrees with frame size" });
    }
    let payload = frame[HEADER_LEN..frame.len() - 4].to_vec();
    let mut crc = crc32fast::Hasher::new();
    crc.update(&frame[..frame.len() - 4]);
    let want = crc.finalize();
    let got = u32::from_le_bytes(frame[frame.len() - 4..].try_into().unwrap());
    if got != want {
        return Err(ProtocolError::BadCrc { got, want });
    }
    Ok(Message { kind, f32_payload, worker_id, outer_step, payload })
}

pub fn write_message(w: &mut impl Write, msg: &Message) -> Result<(), ProtocolError> {
    w.write_all(&encode_message(msg))?;
    w.flush()?;
    Ok(())
}

/// Read one length-prefixed frame from the stream.
pub fn read_message(r: &mut impl Read) -> Result<Message, ProtocolError> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)?;
    let magic: [u8; 4] = header[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(ProtocolError::BadMagic(magic));
    }
    MsgKind::from_byte(header[4])?;
    let payload_len = u64::from_le_bytes(header[13..21].try_into().unwrap());
    if payload_len > MAX_PAYLOAD {
        return Err(ProtocolError::BadLength { len: payload_len, why: "payload exceeds maximum" });
    }
    let mut rest = vec![0u8; payload_len as usize + 4];
    r.read_exact(&mut rest)?;
    let mut frame = header.to_vec();
    frame.extend_from_slice(&rest);
    decode_message(&frame)
}

/// JOIN payload: the config hash both sides must agree on.
pub fn join_payload(config_hash: u64) -> Vec<u8> {
    config_hash.to_le_bytes().to_vec()
}

pub fn parse_join_payload(payload: &[u8]) -> Result<u64, ProtocolError> {
    let bytes: [u8; 8] = payload
        .try_into()
        .map_err(|_| ProtocolError::BadLength { len: payload.len() as u64, why: "join payload must be 8 bytes" })?;
    Ok(u64::from_le_bytes(bytes))
}
