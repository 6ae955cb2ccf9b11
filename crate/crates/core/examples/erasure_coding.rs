//! Encodes four data shards with two parity shards, drops any two and decodes.

use mcr::multilevel::{rs_decode, rs_encode};

fn main() -> anyhow::Result<()> {
    let (k, m) = (4, 2);
    let data: Vec<Vec<u8>> = (0..k)
        .map(|i| format!("shard {i} payload").into_bytes())
        .collect();
    let refs: Vec<&[u8]> = data.iter().map(Vec::as_slice).collect();
    let parity = rs_encode(&refs, m)?;
    let all: Vec<&[u8]> = refs
        .iter()
        .copied()
        .chain(parity.iter().map(Vec::as_slice))
        .collect();

    for lost in [[0, 1], [1, 4], [4, 5]] {
        let survivors: Vec<(usize, &[u8])> = all
            .iter()
            .enumerate()
            .filter(|(i, _)| !lost.contains(i))
            .map(|(i, s)| (i, *s))
            .collect();
        let decoded = rs_decode(&survivors, k, m)?;
        assert_eq!(decoded, data);
        println!(
            "lost {lost:?}: recovered {:?}",
            String::from_utf8_lossy(&decoded[0])
        );
    }

    let too_few: Vec<(usize, &[u8])> = all
        .iter()
        .enumerate()
        .skip(3)
        .map(|(i, s)| (i, *s))
        .collect();
    println!("three losses: {}", rs_decode(&too_few, k, m).unwrap_err());
    Ok(())
}
