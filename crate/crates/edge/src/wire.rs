//! Length-prefixed frames: `len u32 | type u8 | payload`, where `len` counts
//! the type byte and the payload.

use std::io::{self, Read, Write};

use csicl_core::data::CsiMatrix;
use csicl_core::numeric::Tensor2;
use thiserror::Error;

pub const HELLO: u8 = 1;
pub const DATA_BATCH: u8 = 2;
pub const TRAIN_DONE: u8 = 3;
pub const MODEL_PUSH: u8 = 4;
pub const ACK: u8 = 5;
pub const INFER_REQ: u8 = 6;
pub const INFER_RESP: u8 = 7;
pub const ERROR: u8 = 255;

/// Largest accepted frame body.
pub const MAX_FRAME: usize = 64 << 20;

/// Error codes carried by `ERROR` frames.
pub mod code {
    pub const UNKNOWN_TYPE: u16 = 1;
    pub const UNEXPECTED: u16 = 2;
    pub const BAD_FRAME: u16 = 3;
    pub const BATCH_UNPARSEABLE: u16 = 20;
    pub const BATCH_SHAPE: u16 = 21;
    pub const BATCH_LABELS: u16 = 22;
    pub const BAD_REQUEST: u16 = 23;
    pub const NOTHING_TO_TRAIN: u16 = 30;
    pub const TRAINING_FAILED: u16 = 31;
    pub const MODEL_ABSENT: u16 = 40;
    pub const INFERENCE_FAILED: u16 = 46;
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("frame length {0} is invalid")]
    BadLength(usize),
    #[error("unknown frame type {0}")]
    UnknownType(u8),
    #[error("malformed {kind} payload: {reason}")]
    Payload { kind: &'static str, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn payload_err(kind: &'static str, reason: impl Into<String>) -> WireError {
    WireError::Payload {
        kind,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: u8,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn encode(&self) -> Vec<u8> {
        let len = u32::try_from(self.payload.len() + 1).expect("frame exceeds u32 length");
        let mut out = Vec::with_capacity(self.payload.len() + 5);
        out.extend_from_slice(&len.to_le_bytes());
        out.push(self.kind);
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parses one frame from the front of `bytes`, returning it with the
    /// number of bytes consumed, or `None` if more bytes are needed.
    pub fn decode(bytes: &[u8]) -> Result<Option<(Frame, usize)>, WireError> {
        if bytes.len() < 4 {
            return Ok(None);
        }
        let len = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
        if len == 0 || len > MAX_FRAME {
            return Err(WireError::BadLength(len));
        }
        if bytes.len() < 4 + len {
            return Ok(None);
        }
        let frame = Frame {
            kind: bytes[4],
            payload: bytes[5..4 + len].to_vec(),
        };
        Ok(Some((frame, 4 + len)))
    }
}

/// Reads one frame; `Ok(None)` on a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Frame>, WireError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len) as usize;
    if len == 0 || len > MAX_FRAME {
        return Err(WireError::BadLength(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    let payload = body.split_off(1);
    Ok(Some(Frame {
        kind: body[0],
        payload,
    }))
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> io::Result<()> {
    w.write_all(&frame.encode())?;
    w.flush()
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    Hello,
    /// CSV text in the dataset container format.
    DataBatch(String),
    TrainDone,
    /// Serialized model bundle.
    ModelPush(Vec<u8>),
    Ack,
    InferReq(CsiMatrix),
    InferResp { class: u32, logits: Vec<f32> },
    Error { code: u16, message: String },
}

fn u32_at(b: &[u8], at: usize) -> Option<u32> {
    b.get(at..at + 4).map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
}

/// `n u32 | d u32 | n*d f32`, NaN marks a missing cell.
fn encode_matrix(m: &CsiMatrix) -> Vec<u8> {
    let (n, d) = (m.n(), m.d());
    let mut out = Vec::with_capacity(8 + 4 * n * d);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for t in 0..n {
        for i in 0..d {
            let v = if m.is_missing(t, i) {
                f32::NAN
            } else {
                m.values().get(t, i) as f32
            };
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode_matrix(b: &[u8]) -> Result<CsiMatrix, WireError> {
    let kind = "INFER_REQ";
    let (n, d) = match (u32_at(b, 0), u32_at(b, 4)) {
        (Some(n), Some(d)) => (n as usize, d as usize),
        _ => return Err(payload_err(kind, "missing shape")),
    };
    let cells = n
        .checked_mul(d)
        .filter(|&c| c > 0 && c.checked_mul(4) == Some(b.len() - 8))
        .ok_or_else(|| payload_err(kind, format!("{n}x{d} does not match {} data bytes", b.len() - 8)))?;
    let mut data = Vec::with_capacity(cells);
    let mut missing = Vec::with_capacity(cells);
    for c in b[8..].chunks_exact(4) {
        let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        if v.is_nan() {
            data.push(f64::NAN);
            missing.push(true);
        } else if v.is_infinite() {
            return Err(payload_err(kind, "infinite cell"));
        } else {
            data.push(v as f64);
            missing.push(false);
        }
    }
    let values = Tensor2::from_vec(n, d, data).map_err(|e| payload_err(kind, e.to_string()))?;
    CsiMatrix::with_missing(values, missing).map_err(|e| payload_err(kind, e.to_string()))
}

impl WireMessage {
    pub fn to_frame(&self) -> Frame {
        let (kind, payload) = match self {
            WireMessage::Hello => (HELLO, Vec::new()),
            WireMessage::DataBatch(csv) => (DATA_BATCH, csv.as_bytes().to_vec()),
            WireMessage::TrainDone => (TRAIN_DONE, Vec::new()),
            WireMessage::ModelPush(bundle) => (MODEL_PUSH, bundle.clone()),
            WireMessage::Ack => (ACK, Vec::new()),
            WireMessage::InferReq(m) => (INFER_REQ, encode_matrix(m)),
            WireMessage::InferResp { class, logits } => {
                let mut p = Vec::with_capacity(8 + 4 * logits.len());
                p.extend_from_slice(&class.to_le_bytes());
                p.extend_from_slice(&(logits.len() as u32).to_le_bytes());
                for l in logits {
                    p.extend_from_slice(&l.to_le_bytes());
                }
                (INFER_RESP, p)
            }
            WireMessage::Error { code, message } => {
                let mut p = code.to_le_bytes().to_vec();
                p.extend_from_slice(message.as_bytes());
                (ERROR, p)
            }
        };
        Frame { kind, payload }
    }

    pub fn from_frame(frame: &Frame) -> Result<Self, WireError> {
        let p = &frame.payload;
        let empty = |msg: WireMessage, kind: &'static str| {
            if p.is_empty() {
                Ok(msg)
            } else {
                Err(payload_err(kind, "expected an empty payload"))
            }
        };
        match frame.kind {
            HELLO => empty(WireMessage::Hello, "HELLO"),
            TRAIN_DONE => empty(WireMessage::TrainDone, "TRAIN_DONE"),
            ACK => empty(WireMessage::Ack, "ACK"),
            DATA_BATCH => String::from_utf8(p.clone())
                .map(WireMessage::DataBatch)
                .map_err(|_| payload_err("DATA_BATCH", "not UTF-8")),
            MODEL_PUSH => Ok(WireMessage::ModelPush(p.clone())),
            INFER_REQ => decode_matrix(p).map(WireMessage::InferReq),
            INFER_RESP => {
                let kind = "INFER_RESP";
                let (class, count) = match (u32_at(p, 0), u32_at(p, 4)) {
                    (Some(c), Some(k)) => (c, k as usize),
                    _ => return Err(payload_err(kind, "missing header")),
                };
                if count.checked_mul(4) != Some(p.len() - 8) {
                    return Err(payload_err(kind, format!("{count} logits vs {} bytes", p.len() - 8)));
                }
                let logits = p[8..]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                Ok(WireMessage::InferResp { class, logits })
            }
            ERROR => {
                if p.len() < 2 {
                    return Err(payload_err("ERROR", "missing code"));
                }
                Ok(WireMessage::Error {
                    code: u16::from_le_bytes([p[0], p[1]]),
                    message: String::from_utf8_lossy(&p[2..]).into_owned(),
                })
            }
            other => Err(WireError::UnknownType(other)),
        }
    }

    pub fn error(code: u16, message: impl Into<String>) -> Self {
        WireMessage::Error {
            code,
            message: message.into(),
        }
    }
}

/// The `ERROR` reply for a frame that could not be decoded.
pub fn error_for(err: &WireError) -> WireMessage {
    let c = match err {
        WireError::UnknownType(_) => code::UNKNOWN_TYPE,
        WireError::Payload { kind: "DATA_BATCH", .. } => code::BATCH_UNPARSEABLE,
        WireError::Payload { .. } => code::BAD_REQUEST,
        WireError::BadLength(_) | WireError::Io(_) => code::BAD_FRAME,
    };
    WireMessage::error(c, err.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_counts_type_byte() {
        let f = WireMessage::Hello.to_frame().encode();
        assert_eq!(f, vec![1, 0, 0, 0, HELLO]);
        let (back, used) = Frame::decode(&f).unwrap().unwrap();
        assert_eq!(used, 5);
        assert_eq!(WireMessage::from_frame(&back).unwrap(), WireMessage::Hello);
    }

    #[test]
    fn partial_and_invalid_lengths() {
        assert!(Frame::decode(&[2, 0, 0]).unwrap().is_none());
        assert!(Frame::decode(&[2, 0, 0, 0, ACK]).unwrap().is_none());
        assert!(matches!(Frame::decode(&[0, 0, 0, 0]), Err(WireError::BadLength(0))));
    }

    #[test]
    fn unknown_type_maps_to_code_one() {
        let err = WireMessage::from_frame(&Frame { kind: 9, payload: vec![] }).unwrap_err();
        assert!(matches!(error_for(&err), WireMessage::Error { code: 1, .. }));
    }

    #[test]
    fn missing_cells_travel_as_nan() {
        let mut m = CsiMatrix::new(Tensor2::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]])).unwrap();
        m.set_missing(1, 0);
        let msg = WireMessage::InferReq(m.clone());
        let back = WireMessage::from_frame(&msg.to_frame()).unwrap();
        let WireMessage::InferReq(got) = back else { panic!("wrong type") };
        assert!(got.is_missing(1, 0));
        assert!(!got.is_missing(0, 0));
        assert_eq!(got.values().get(1, 1), 4.0);
    }
}
