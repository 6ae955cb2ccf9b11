//! Protected regions and their checkpoint blob.
//!
//! Blob layout, little-endian, regions in ascending id order:
//! `[u32 n] { [u32 id][u32 elem_size][u64 count][elem_size * count bytes] }*`.
//! Bytes after the last region must be zero (group padding).

use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtectedRegion {
    pub id: u32,
    pub elem_size: u32,
    pub count: u64,
    pub data: Vec<u8>,
}

impl ProtectedRegion {
    pub fn new(id: u32, elem_size: u32, data: Vec<u8>) -> Self {
        let count = if elem_size == 0 {
            0
        } else {
            data.len() as u64 / elem_size as u64
        };
        ProtectedRegion {
            id,
            elem_size,
            count,
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_consistent(&self) -> bool {
        self.elem_size as u64 * self.count == self.data.len() as u64
    }
}

pub fn serialize(regions: &BTreeMap<u32, ProtectedRegion>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(regions.len() as u32).to_le_bytes());
    for r in regions.values() {
        out.extend_from_slice(&r.id.to_le_bytes());
        out.extend_from_slice(&r.elem_size.to_le_bytes());
        out.extend_from_slice(&r.count.to_le_bytes());
        out.extend_from_slice(&r.data);
    }
    out
}

pub fn deserialize(blob: &[u8]) -> Result<BTreeMap<u32, ProtectedRegion>, String> {
    let mut pos = 0;
    let mut take = |n: usize| -> Result<&[u8], String> {
        let s = blob.get(pos..pos + n).ok_or("truncated region blob")?;
        pos += n;
        Ok(s)
    };
    let n = u32::from_le_bytes(take(4)?.try_into().unwrap());
    let mut out = BTreeMap::new();
    for _ in 0..n {
        let id = u32::from_le_bytes(take(4)?.try_into().unwrap());
        let elem_size = u32::from_le_bytes(take(4)?.try_into().unwrap());
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let len = usize::try_from(elem_size as u64 * count).map_err(|e| e.to_string())?;
        let data = take(len)?.to_vec();
        if out
            .insert(
                id,
                ProtectedRegion {
                    id,
                    elem_size,
                    count,
                    data,
                },
            )
            .is_some()
        {
            return Err(format!("region {id} appears twice"));
        }
    }
    if blob[pos..].iter().any(|&b| b != 0) {
        return Err("nonzero bytes after the last region".into());
    }
    Ok(out)
}
