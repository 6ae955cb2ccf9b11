//! Rail wire framing, little-endian:
//! `[u32 frame_len][u8 frame_type][u64 src_process][u64 dst_process]
//!  [u64 src_task][u64 dst_task][i64 tag][payload]`.
//! `frame_len` counts every byte after itself.

use std::io::{self, Read, Write};

use super::NetError;

pub const FRAME_HEADER_LEN: usize = 1 + 8 * 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameType {
    Data = 0,
    Control = 1,
    ConnHandshake = 2,
}

impl FrameType {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(FrameType::Data),
            1 => Some(FrameType::Control),
            2 => Some(FrameType::ConnHandshake),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub frame_type: FrameType,
    pub src_process: u64,
    pub dst_process: u64,
    pub src_task: u64,
    pub dst_task: u64,
    pub tag: i64,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn wire_len(&self) -> usize {
        4 + FRAME_HEADER_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        let len = (FRAME_HEADER_LEN + self.payload.len()) as u32;
        out.extend_from_slice(&len.to_le_bytes());
        out.push(self.frame_type as u8);
        out.extend_from_slice(&self.src_process.to_le_bytes());
        out.extend_from_slice(&self.dst_process.to_le_bytes());
        out.extend_from_slice(&self.src_task.to_le_bytes());
        out.extend_from_slice(&self.dst_task.to_le_bytes());
        out.extend_from_slice(&self.tag.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Decodes one frame from the front of `buf`, returning it and the number
    /// of bytes consumed.
    pub fn decode(buf: &[u8]) -> Result<(Frame, usize), NetError> {
        if buf.len() < 4 {
            return Err(NetError::Malformed("short frame length".into()));
        }
        let len = u32::from_le_bytes(buf[0..4].try_into().unwrap()) as usize;
        if len < FRAME_HEADER_LEN {
            return Err(NetError::Malformed(format!(
                "frame_len {len} below header size"
            )));
        }
        let body = buf
            .get(4..4 + len)
            .ok_or_else(|| NetError::Malformed("truncated frame".into()))?;
        let frame_type = FrameType::from_u8(body[0])
            .ok_or_else(|| NetError::Malformed(format!("unknown frame type {}", body[0])))?;
        let u64_at = |off: usize| u64::from_le_bytes(body[off..off + 8].try_into().unwrap());
        Ok((
            Frame {
                frame_type,
                src_process: u64_at(1),
                dst_process: u64_at(9),
                src_task: u64_at(17),
                dst_task: u64_at(25),
                tag: u64_at(33) as i64,
                payload: body[FRAME_HEADER_LEN..].to_vec(),
            },
            4 + len,
        ))
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(&self.encode())
    }

    /// Reads one frame from a stream. Returns `Ok(None)` on clean EOF.
    pub fn read_from(r: &mut impl Read) -> Result<Option<Frame>, NetError> {
        let mut len_buf = [0u8; 4];
        match r.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(NetError::Io(e.to_string())),
        }
        let len = u32::from_le_bytes(len_buf) as usize;
        let mut buf = Vec::with_capacity(4 + len);
        buf.extend_from_slice(&len_buf);
        buf.resize(4 + len, 0);
        r.read_exact(&mut buf[4..])
            .map_err(|e| NetError::Io(e.to_string()))?;
        Frame::decode(&buf).map(|(f, _)| Some(f))
    }
}
