//! Bit-exact frame layout. All integers are big-endian.
//!
//! ```text
//! magic "FTRK" (4) | version (1) | msg_type (1) | session_id (8) | batch_id (8)
//! | n_chains (1) | reserved (1) | total_len (8)
//! then n_chains × [serial (1) | ct_len (4) | ct (ct_len) | tag (16)]
//! ```
//!
//! `total_len` is the sum of all `ct_len` fields. Decoding is total: any
//! byte string yields a frame or a [`FrameError`], never a panic, and no
//! allocation is sized from an unchecked length field.

use std::io::{self, Read};

use thiserror::Error;

use crate::chain::{ChainRecord, TAG_BYTES};
use crate::gcm::Tag128;

pub const MAGIC: [u8; 4] = *b"FTRK";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 32;
pub const RECORD_OVERHEAD: usize = 1 + 4 + TAG_BYTES;
const READ_STEP: usize = 64 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "UPPERCASE")]
#[repr(u8)]
pub enum MsgType {
    Hello = 1,
    Reply = 2,
    Data = 3,
    Ack = 4,
    Abort = 5,
}

impl MsgType {
    fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            1 => MsgType::Hello,
            2 => MsgType::Reply,
            3 => MsgType::Data,
            4 => MsgType::Ack,
            5 => MsgType::Abort,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub session_id: u64,
    pub batch_id: u64,
    pub reserved: u8,
    pub total_len: u64,
    pub records: Vec<ChainRecord>,
}

impl Frame {
    pub fn n_chains(&self) -> usize {
        self.records.len()
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.records.iter().map(|r| RECORD_OVERHEAD + r.ct.len()).sum::<usize>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameLimits {
    /// Largest accepted `total_len` (and therefore any single `ct_len`).
    pub max_total_len: u64,
}

impl Default for FrameLimits {
    fn default() -> Self {
        Self { max_total_len: 1 << 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown message type {0}")]
    BadMsgType(u8),
    #[error("frame truncated: needed {needed} more bytes at offset {offset}")]
    TruncatedFrame { offset: usize, needed: usize },
    #[error("length {len} exceeds the limit {max}")]
    LengthOverflow { len: u64, max: u64 },
    #[error("records hold {got} bytes but the header declares {declared}")]
    LengthMismatch { declared: u64, got: u64 },
    #[error("{0} bytes follow the last record")]
    TrailingBytes(usize),
}

pub fn encode_frame(f: &Frame) -> Vec<u8> {
    assert!(f.records.len() <= usize::from(u8::MAX), "at most 255 chain records per frame");
    let mut out = Vec::with_capacity(f.encoded_len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(f.msg_type as u8);
    out.extend_from_slice(&f.session_id.to_be_bytes());
    out.extend_from_slice(&f.batch_id.to_be_bytes());
    out.push(f.records.len() as u8);
    out.push(f.reserved);
    out.extend_from_slice(&f.total_len.to_be_bytes());
    for r in &f.records {
        let len = u32::try_from(r.ct.len()).expect("chain record longer than 4 GiB");
        out.push(r.serial);
        out.extend_from_slice(&len.to_be_bytes());
        out.extend_from_slice(&r.ct);
        out.extend_from_slice(&r.tag.0);
    }
    out
}

struct Header {
    msg_type: MsgType,
    session_id: u64,
    batch_id: u64,
    n_chains: u8,
    reserved: u8,
    total_len: u64,
}

fn be_u64(b: &[u8]) -> u64 {
    u64::from_be_bytes(b.try_into().expect("8 bytes"))
}

fn parse_header(b: &[u8; HEADER_LEN], limits: &FrameLimits) -> Result<Header, FrameError> {
    let magic: [u8; 4] = b[0..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(FrameError::BadMagic(magic));
    }
    if b[4] != VERSION {
        return Err(FrameError::BadVersion(b[4]));
    }
    let msg_type = MsgType::from_byte(b[5]).ok_or(FrameError::BadMsgType(b[5]))?;
    let total_len = be_u64(&b[24..32]);
    if total_len > limits.max_total_len {
        return Err(FrameError::LengthOverflow { len: total_len, max: limits.max_total_len });
    }
    Ok(Header {
        msg_type,
        session_id: be_u64(&b[6..14]),
        batch_id: be_u64(&b[14..22]),
        n_chains: b[22],
        reserved: b[23],
        total_len,
    })
}

/// Reads one frame from a byte source. `pull(buf, offset)` fills `buf`
/// completely or reports how much was missing.
fn read_with(
    limits: &FrameLimits,
    mut pull: impl FnMut(&mut [u8], usize) -> Result<(), FrameError>,
) -> Result<Frame, FrameError> {
    let mut head = [0u8; HEADER_LEN];
    pull(&mut head, 0)?;
    let h = parse_header(&head, limits)?;
    let mut offset = HEADER_LEN;
    let mut records = Vec::with_capacity(usize::from(h.n_chains));
    let mut seen: u64 = 0;
    for _ in 0..h.n_chains {
        let mut rh = [0u8; 5];
        pull(&mut rh, offset)?;
        offset += 5;
        let len = u64::from(u32::from_be_bytes(rh[1..5].try_into().expect("4 bytes")));
        seen += len;
        if seen > h.total_len {
            return Err(FrameError::LengthMismatch { declared: h.total_len, got: seen });
        }
        // Grow in bounded steps so a lying length costs at most one step.
        let mut ct = Vec::new();
        while (ct.len() as u64) < len {
            let start = ct.len();
            let step = (len - start as u64).min(READ_STEP as u64) as usize;
            ct.resize(start + step, 0);
            pull(&mut ct[start..], offset + start)?;
        }
        offset += ct.len();
        let mut tag = [0u8; TAG_BYTES];
        pull(&mut tag, offset)?;
        offset += TAG_BYTES;
        records.push(ChainRecord { serial: rh[0], ct, tag: Tag128(tag) });
    }
    if seen != h.total_len {
        return Err(FrameError::LengthMismatch { declared: h.total_len, got: seen });
    }
    Ok(Frame {
        msg_type: h.msg_type,
        session_id: h.session_id,
        batch_id: h.batch_id,
        reserved: h.reserved,
        total_len: h.total_len,
        records,
    })
}

/// Decodes exactly one frame occupying all of `bytes`.
pub fn decode_frame(bytes: &[u8], limits: &FrameLimits) -> Result<Frame, FrameError> {
    let mut cursor = 0usize;
    let frame = read_with(limits, |buf, offset| {
        let avail = bytes.len() - cursor;
        if avail < buf.len() {
            return Err(FrameError::TruncatedFrame { offset, needed: buf.len() - avail });
        }
        buf.copy_from_slice(&bytes[cursor..cursor + buf.len()]);
        cursor += buf.len();
        Ok(())
    })?;
    if cursor != bytes.len() {
        return Err(FrameError::TrailingBytes(bytes.len() - cursor));
    }
    Ok(frame)
}

#[derive(Debug, Error)]
pub enum ReadError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Reads one frame from a stream. Returns the frame together with its raw
/// bytes. A clean end of stream before the first byte gives `Ok(None)`.
pub fn read_frame<R: Read>(r: &mut R, limits: &FrameLimits) -> Result<Option<(Frame, Vec<u8>)>, ReadError> {
    let mut raw = Vec::new();
    let mut io_err = None;
    let result = read_with(limits, |buf, offset| {
        let mut filled = 0;
        while filled < buf.len() {
            match r.read(&mut buf[filled..]) {
                Ok(0) => {
                    return Err(FrameError::TruncatedFrame { offset: offset + filled, needed: buf.len() - filled })
                }
                Ok(k) => filled += k,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => {
                    io_err = Some(e);
                    return Err(FrameError::TruncatedFrame { offset: offset + filled, needed: buf.len() - filled });
                }
            }
        }
        raw.extend_from_slice(buf);
        Ok(())
    });
    match (result, io_err) {
        (_, Some(e)) => Err(ReadError::Io(e)),
        (Err(FrameError::TruncatedFrame { offset: 0, needed: HEADER_LEN }), None) => Ok(None),
        (Err(e), None) => Err(e.into()),
        (Ok(f), None) => Ok(Some((f, raw))),
    }
}
