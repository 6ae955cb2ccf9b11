//! Stored checkpoint objects: a 24-byte header followed by the payload.
//!
//! `[u32 magic][u8 level][u8 shard_idx][u16 group][u32 epoch][u64 orig_len][u32 crc]`,
//! little-endian, with the CRC-32 taken over the payload.

use super::rs::RsError;

pub const SHARD_MAGIC: u32 = 0x4D43_534B;
pub const SHARD_HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardHeader {
    pub level: u8,
    pub shard_idx: u8,
    pub group: u16,
    pub epoch: u32,
    /// Length of the unpadded per-rank blob (padded length for parity).
    pub orig_len: u64,
    pub crc: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedShard {
    pub header: ShardHeader,
    pub payload: Vec<u8>,
}

impl EncodedShard {
    pub fn new(
        level: u8,
        shard_idx: u8,
        group: u16,
        epoch: u32,
        orig_len: u64,
        payload: Vec<u8>,
    ) -> Self {
        EncodedShard {
            header: ShardHeader {
                level,
                shard_idx,
                group,
                epoch,
                orig_len,
                crc: crc32fast::hash(&payload),
            },
            payload,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(SHARD_HEADER_LEN + self.payload.len());
        out.extend_from_slice(&SHARD_MAGIC.to_le_bytes());
        out.push(h.level);
        out.push(h.shard_idx);
        out.extend_from_slice(&h.group.to_le_bytes());
        out.extend_from_slice(&h.epoch.to_le_bytes());
        out.extend_from_slice(&h.orig_len.to_le_bytes());
        out.extend_from_slice(&h.crc.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parses and verifies a stored object.
    pub fn decode(bytes: &[u8]) -> Result<Self, RsError> {
        let bad = |index: usize| RsError::CrcMismatch { index };
        if bytes.len() < SHARD_HEADER_LEN {
            return Err(bad(0));
        }
        let idx = bytes[5] as usize;
        if u32::from_le_bytes(bytes[0..4].try_into().unwrap()) != SHARD_MAGIC {
            return Err(bad(idx));
        }
        let header = ShardHeader {
            level: bytes[4],
            shard_idx: bytes[5],
            group: u16::from_le_bytes(bytes[6..8].try_into().unwrap()),
            epoch: u32::from_le_bytes(bytes[8..12].try_into().unwrap()),
            orig_len: u64::from_le_bytes(bytes[12..20].try_into().unwrap()),
            crc: u32::from_le_bytes(bytes[20..24].try_into().unwrap()),
        };
        let payload = bytes[SHARD_HEADER_LEN..].to_vec();
        if crc32fast::hash(&payload) != header.crc {
            return Err(bad(idx));
        }
        Ok(EncodedShard { header, payload })
    }
}
