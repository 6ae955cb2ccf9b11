//! Systematic Reed-Solomon erasure code over GF(2^8).
//!
//! The generator stacks the identity on a Cauchy matrix `C[j][i] = 1 / (x_i + y_j)`
//! with `x_i = i` and `y_j = k + j`. Every square submatrix of a Cauchy matrix
//! is invertible, so any `k` of the `k + m` shards determine the data.

use thiserror::Error;

use super::gf256;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RsError {
    #[error("invalid erasure code: {0}")]
    Domain(String),
    #[error("{have} distinct shards available, {need} required")]
    InsufficientShards { have: usize, need: usize },
    #[error("shard {index} failed its checksum")]
    CrcMismatch { index: usize },
}

fn check_params(k: usize, m: usize) -> Result<(), RsError> {
    if k == 0 || k + m > 255 {
        return Err(RsError::Domain(format!(
            "k={k}, m={m} (need 1 <= k and k + m <= 255)"
        )));
    }
    Ok(())
}

/// Coefficient of data shard `i` in parity shard `j`.
pub fn cauchy(k: usize, i: usize, j: usize) -> u8 {
    gf256::inv((i as u8) ^ ((k + j) as u8))
}

/// Generator row for shard index `s` (data rows are unit vectors).
fn generator_row(k: usize, s: usize) -> Vec<u8> {
    if s < k {
        (0..k).map(|i| (i == s) as u8).collect()
    } else {
        (0..k).map(|i| cauchy(k, i, s - k)).collect()
    }
}

/// Computes `m` parity shards from `k` equal-length data shards.
pub fn rs_encode(data: &[&[u8]], m: usize) -> Result<Vec<Vec<u8>>, RsError> {
    let k = data.len();
    check_params(k, m)?;
    let len = data[0].len();
    if data.iter().any(|d| d.len() != len) {
        return Err(RsError::Domain("data shards differ in length".into()));
    }
    Ok((0..m)
        .map(|j| {
            let mut p = vec![0u8; len];
            for (i, d) in data.iter().enumerate() {
                gf256::mul_acc(&mut p, d, cauchy(k, i, j));
            }
            p
        })
        .collect())
}

/// Gauss-Jordan inversion of a square matrix. `None` if singular.
fn invert(mut a: Vec<Vec<u8>>) -> Option<Vec<Vec<u8>>> {
    let n = a.len();
    let mut inv: Vec<Vec<u8>> = (0..n)
        .map(|i| (0..n).map(|j| (i == j) as u8).collect())
        .collect();
    for col in 0..n {
        let pivot = (col..n).find(|&r| a[r][col] != 0)?;
        a.swap(col, pivot);
        inv.swap(col, pivot);
        let scale = gf256::inv(a[col][col]);
        for j in 0..n {
            a[col][j] = gf256::mul(a[col][j], scale);
            inv[col][j] = gf256::mul(inv[col][j], scale);
        }
        for r in 0..n {
            if r != col && a[r][col] != 0 {
                let f = a[r][col];
                let (pa, pi) = (a[col].clone(), inv[col].clone());
                for j in 0..n {
                    a[r][j] ^= gf256::mul(f, pa[j]);
                    inv[r][j] ^= gf256::mul(f, pi[j]);
                }
            }
        }
    }
    Some(inv)
}

/// Rebuilds the `k` data shards from any `k` distinct shards given as
/// `(index, bytes)` with indices in `0..k+m`.
pub fn rs_decode(shards: &[(usize, &[u8])], k: usize, m: usize) -> Result<Vec<Vec<u8>>, RsError> {
    check_params(k, m)?;
    let mut chosen: Vec<(usize, &[u8])> = Vec::with_capacity(k);
    for &(idx, bytes) in shards {
        if idx >= k + m {
            return Err(RsError::Domain(format!("shard index {idx} out of range")));
        }
        if !chosen.iter().any(|&(i, _)| i == idx) && chosen.len() < k {
            chosen.push((idx, bytes));
        }
    }
    if chosen.len() < k {
        return Err(RsError::InsufficientShards {
            have: chosen.len(),
            need: k,
        });
    }
    let len = chosen[0].1.len();
    if chosen.iter().any(|(_, b)| b.len() != len) {
        return Err(RsError::Domain("shards differ in length".into()));
    }
    // fast path: all data shards present
    if chosen.iter().all(|&(i, _)| i < k) {
        let mut out = vec![Vec::new(); k];
        for (i, b) in chosen {
            out[i] = b.to_vec();
        }
        return Ok(out);
    }
    let matrix: Vec<Vec<u8>> = chosen.iter().map(|&(i, _)| generator_row(k, i)).collect();
    let inv = invert(matrix).expect("Cauchy submatrices are invertible");
    Ok((0..k)
        .map(|row| {
            let mut d = vec![0u8; len];
            for (c, &(_, bytes)) in chosen.iter().enumerate() {
                gf256::mul_acc(&mut d, bytes, inv[row][c]);
            }
            d
        })
        .collect())
}
