//! Process image layout, little-endian:
//!
//! ```text
//! "MCRIMG01" u32 version u64 epoch u64 process
//! u32 n_tasks   { u64 rank u8 kind u8 state u64 clock u32 blob_len blob }*
//! u32 n_rails   { u16 name_len name u32 n_endpoints
//!                 { u64 remote u8 state u8 origin u64 seq u16 info_len info }* }*
//! u32 crc32 over everything above
//! ```

use std::path::Path;

use super::CkptError;
use crate::multirail::{EndpointState, RouteOrigin};
use crate::sched::{TaskKind, TaskState};

pub const IMAGE_MAGIC: &[u8; 8] = b"MCRIMG01";
pub const IMAGE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskRecord {
    pub rank: u64,
    pub kind: TaskKind,
    pub state: TaskState,
    pub clock: u64,
    pub blob: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EndpointRecord {
    pub remote: u64,
    pub state: EndpointState,
    pub origin: RouteOrigin,
    pub seq: u64,
    pub conn_info: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RailSection {
    pub rail: String,
    pub endpoints: Vec<EndpointRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProcessImage {
    pub version: u32,
    pub epoch: u64,
    pub process: u64,
    pub tasks: Vec<TaskRecord>,
    pub rails: Vec<RailSection>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let s = self
            .buf
            .get(self.pos..self.pos + n)
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self, n: usize) -> Result<String, String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }
}

fn origin_code(o: RouteOrigin) -> u8 {
    match o {
        RouteOrigin::Static => 0,
        RouteOrigin::Dynamic => 1,
    }
}

impl ProcessImage {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(IMAGE_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.process.to_le_bytes());
        out.extend_from_slice(&(self.tasks.len() as u32).to_le_bytes());
        for t in &self.tasks {
            out.extend_from_slice(&t.rank.to_le_bytes());
            out.push(t.kind.code());
            out.push(t.state.code());
            out.extend_from_slice(&t.clock.to_le_bytes());
            out.extend_from_slice(&(t.blob.len() as u32).to_le_bytes());
            out.extend_from_slice(&t.blob);
        }
        out.extend_from_slice(&(self.rails.len() as u32).to_le_bytes());
        for r in &self.rails {
            out.extend_from_slice(&(r.rail.len() as u16).to_le_bytes());
            out.extend_from_slice(r.rail.as_bytes());
            out.extend_from_slice(&(r.endpoints.len() as u32).to_le_bytes());
            for e in &r.endpoints {
                out.extend_from_slice(&e.remote.to_le_bytes());
                out.push(e.state.code());
                out.push(origin_code(e.origin));
                out.extend_from_slice(&e.seq.to_le_bytes());
                out.extend_from_slice(&(e.conn_info.len() as u16).to_le_bytes());
                out.extend_from_slice(e.conn_info.as_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses an image. `path` only labels errors.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self, CkptError> {
        let malformed = |msg: String| CkptError::Malformed {
            what: path.display().to_string(),
            msg,
        };
        if bytes.len() < IMAGE_MAGIC.len() + 4 {
            return Err(CkptError::CrcMismatch(path.to_path_buf()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(CkptError::CrcMismatch(path.to_path_buf()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        let parse = |r: &mut Reader| -> Result<ProcessImage, String> {
            if r.take(8)? != IMAGE_MAGIC {
                return Err("bad magic".into());
            }
            let version = r.u32()?;
            if version != IMAGE_VERSION {
                return Err(format!("unsupported version {version}"));
            }
            let epoch = r.u64()?;
            let process = r.u64()?;
            let n_tasks = r.u32()?;
            let mut tasks = Vec::new();
            for _ in 0..n_tasks {
                let rank = r.u64()?;
                let kind = TaskKind::from_code(r.u8()?).ok_or("bad task kind")?;
                let state = TaskState::from_code(r.u8()?).ok_or("bad task state")?;
                let clock = r.u64()?;
                let len = r.u32()? as usize;
                let blob = r.take(len)?.to_vec();
                tasks.push(TaskRecord {
                    rank,
                    kind,
                    state,
                    clock,
                    blob,
                });
            }
            let n_rails = r.u32()?;
            let mut rails = Vec::new();
            for _ in 0..n_rails {
                let len = r.u16()? as usize;
                let rail = r.string(len)?;
                let n = r.u32()?;
                let mut endpoints = Vec::new();
                for _ in 0..n {
                    let remote = r.u64()?;
                    let state = EndpointState::from_code(r.u8()?).ok_or("bad endpoint state")?;
                    let origin = match r.u8()? {
                        0 => RouteOrigin::Static,
                        1 => RouteOrigin::Dynamic,
                        o => return Err(format!("bad route origin {o}")),
                    };
                    let seq = r.u64()?;
                    let len = r.u16()? as usize;
                    let conn_info = r.string(len)?;
                    endpoints.push(EndpointRecord {
                        remote,
                        state,
                        origin,
                        seq,
                        conn_info,
                    });
                }
                rails.push(RailSection { rail, endpoints });
            }
            if r.pos != r.buf.len() {
                return Err(format!("{} trailing bytes", r.buf.len() - r.pos));
            }
            Ok(ProcessImage {
                version,
                epoch,
                process,
                tasks,
                rails,
            })
        };
        parse(&mut r).map_err(malformed)
    }

    pub fn read(path: &Path) -> Result<Self, CkptError> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CkptError::MissingImage(path.to_path_buf()),
            _ => CkptError::Io(e),
        })?;
        Self::decode(&bytes, path)
    }

    pub fn endpoint_count(&self) -> usize {
        self.rails.iter().map(|r| r.endpoints.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::path::PathBuf;

    fn sample() -> ProcessImage {
        ProcessImage {
            version: IMAGE_VERSION,
            epoch: 3,
            process: 1,
            tasks: vec![TaskRecord {
                rank: 2,
                kind: TaskKind::App,
                state: TaskState::Ready,
                clock: 77,
                blob: vec![1, 2, 3],
            }],
            rails: vec![RailSection {
                rail: "shm_ring".into(),
                endpoints: vec![EndpointRecord {
                    remote: 0,
                    state: EndpointState::Connected,
                    origin: RouteOrigin::Static,
                    seq: 5,
                    conn_info: "shm:0".into(),
                }],
            }],
        }
    }

    #[test]
    fn layout_prefix() {
        let b = sample().encode();
        assert_eq!(&b[..8], b"MCRIMG01");
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..20], &3u64.to_le_bytes());
        assert_eq!(&b[20..28], &1u64.to_le_bytes());
        assert_eq!(&b[28..32], &1u32.to_le_bytes());
        let crc = crc32fast::hash(&b[..b.len() - 4]);
        assert_eq!(&b[b.len() - 4..], &crc.to_le_bytes());
    }

    #[test]
    fn crc_catches_truncation_and_flips() {
        let p = PathBuf::from("rank-1.img");
        let b = sample().encode();
        assert_eq!(ProcessImage::decode(&b, &p).unwrap(), sample());
        assert!(matches!(
            ProcessImage::decode(&b[..b.len() - 1], &p),
            Err(CkptError::CrcMismatch(_))
        ));
        let mut flipped = b.clone();
        flipped[30] ^= 0x40;
        assert!(matches!(
            ProcessImage::decode(&flipped, &p),
            Err(CkptError::CrcMismatch(_))
        ));
    }

    #[test]
    fn crc_matches_reference_value() {
        // standard check value of CRC-32/IEEE
        assert_eq!(crc32fast::hash(b"123456789"), 0xCBF4_3926);
    }

    proptest! {
        #[test]
        fn round_trip(epoch: u64, process: u64, blobs in proptest::collection::vec(
            proptest::collection::vec(any::<u8>(), 0..64), 0..4)) {
            let mut img = sample();
            img.epoch = epoch;
            img.process = process;
            img.tasks = blobs.into_iter().enumerate().map(|(i, blob)| TaskRecord {
                rank: i as u64, kind: TaskKind::App, state: TaskState::Yielded, clock: i as u64 * 3, blob,
            }).collect();
            let bytes = img.encode();
            prop_assert_eq!(ProcessImage::decode(&bytes, Path::new("x")).unwrap(), img);
        }
    }
}
