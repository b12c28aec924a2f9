//! Single-erasure XOR parity over a group of rank artifacts.
//!
//! Members are zero-padded to the longest member rounded up to the block
//! size; true lengths travel with the parity so a reconstructed member can be
//! truncated back. Parity file layout (little-endian):
//!
//! ```text
//! "VCKX" | k u32 | block_size u64 | true length u64 x k | parity bytes
//! ```

use std::path::{Path, PathBuf};

use super::{layout, ResilienceError};
use crate::fsutil::{read_throttled, write_atomic_throttled, DEFAULT_QUANTUM};
use crate::model::CheckpointId;

pub const PARITY_MAGIC: &[u8; 4] = b"VCKX";
pub const DEFAULT_BLOCK_SIZE: u64 = 4096;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParityBlock {
    pub block_size: u64,
    pub lengths: Vec<u64>,
    pub parity: Vec<u8>,
}

fn padded_len(max_len: u64, block_size: u64) -> u64 {
    max_len.div_ceil(block_size) * block_size
}

/// `acc ^= src` over the common prefix, yielding every `quantum` bytes.
fn xor_into(acc: &mut [u8], src: &[u8], quantum: usize) {
    let n = src.len().min(acc.len());
    let quantum = quantum.max(8);
    for (a_chunk, s_chunk) in acc[..n].chunks_mut(quantum).zip(src[..n].chunks(quantum)) {
        let mut a_words = a_chunk.chunks_exact_mut(8);
        let mut s_words = s_chunk.chunks_exact(8);
        for (a, s) in (&mut a_words).zip(&mut s_words) {
            let v = u64::from_ne_bytes(a.try_into().unwrap()) ^ u64::from_ne_bytes(s.try_into().unwrap());
            a.copy_from_slice(&v.to_ne_bytes());
        }
        for (a, s) in a_words.into_remainder().iter_mut().zip(s_words.remainder()) {
            *a ^= s;
        }
        if n > quantum {
            std::thread::yield_now();
        }
    }
}

impl ParityBlock {
    pub fn k(&self) -> usize {
        self.lengths.len()
    }

    pub fn padded_len(&self) -> u64 {
        self.parity.len() as u64
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.k() + self.parity.len());
        out.extend_from_slice(PARITY_MAGIC);
        out.extend_from_slice(&(self.k() as u32).to_le_bytes());
        out.extend_from_slice(&self.block_size.to_le_bytes());
        for l in &self.lengths {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out.extend_from_slice(&self.parity);
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, ResilienceError> {
        let malformed = |m: &str| ResilienceError::Malformed(format!("parity: {m}"));
        if bytes.len() < 16 || &bytes[0..4] != PARITY_MAGIC {
            return Err(malformed("bad magic"));
        }
        let k = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let block_size = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        if k < 2 || block_size == 0 {
            return Err(malformed("bad group parameters"));
        }
        let table_end = 16usize
            .checked_add(k.checked_mul(8).ok_or_else(|| malformed("k overflow"))?)
            .ok_or_else(|| malformed("k overflow"))?;
        if bytes.len() < table_end {
            return Err(malformed("truncated length table"));
        }
        let lengths: Vec<u64> = bytes[16..table_end]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let max = lengths.iter().copied().max().unwrap_or(0);
        let parity = &bytes[table_end..];
        if parity.len() as u64 != padded_len(max, block_size) {
            return Err(malformed("parity length does not match member lengths"));
        }
        Ok(Self { block_size, lengths, parity: parity.to_vec() })
    }
}

/// Bytewise XOR of all payloads, zero-padded to a common block multiple.
pub fn xor_encode(payloads: &[&[u8]], block_size: u64) -> Result<ParityBlock, ResilienceError> {
    xor_encode_throttled(payloads, block_size, DEFAULT_QUANTUM)
}

pub fn xor_encode_throttled(
    payloads: &[&[u8]],
    block_size: u64,
    quantum: usize,
) -> Result<ParityBlock, ResilienceError> {
    if payloads.len() < 2 || block_size == 0 {
        return Err(ResilienceError::EmptyGroup);
    }
    let lengths: Vec<u64> = payloads.iter().map(|p| p.len() as u64).collect();
    let max = lengths.iter().copied().max().unwrap_or(0);
    let mut parity = vec![0u8; padded_len(max, block_size) as usize];
    for p in payloads {
        xor_into(&mut parity, p, quantum);
    }
    Ok(ParityBlock { block_size, lengths, parity })
}

/// Rebuilds member `missing_index` from the other `k - 1` members (in group
/// order, skipping the missing one) and the parity.
pub fn xor_decode(
    surviving: &[&[u8]],
    parity: &ParityBlock,
    missing_index: usize,
) -> Result<Vec<u8>, ResilienceError> {
    let k = parity.k();
    if surviving.len() + 1 < k {
        return Err(ResilienceError::TooManyMissing { missing: k - surviving.len() });
    }
    if surviving.len() + 1 > k || missing_index >= k {
        return Err(ResilienceError::Malformed(format!(
            "{} survivors and missing index {missing_index} for a group of {k}",
            surviving.len()
        )));
    }
    let member_indices = (0..k).filter(|&i| i != missing_index);
    for (s, i) in surviving.iter().zip(member_indices) {
        if s.len() as u64 != parity.lengths[i] {
            return Err(ResilienceError::Malformed(format!(
                "member {i} has {} bytes, parity recorded {}",
                s.len(),
                parity.lengths[i]
            )));
        }
    }
    let mut out = parity.parity.clone();
    for s in surviving {
        xor_into(&mut out, s, DEFAULT_QUANTUM);
    }
    out.truncate(parity.lengths[missing_index] as usize);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct XorGroup {
    pub index: u32,
    pub member_ranks: Vec<u32>,
    pub parity_holder: u32,
    pub block_size: u64,
}

impl XorGroup {
    /// Groups are consecutive rank blocks; the last member holds the parity.
    pub fn of_rank(rank: u32, group_size: u32) -> Self {
        let index = rank / group_size;
        let member_ranks: Vec<u32> = (index * group_size..(index + 1) * group_size).collect();
        let parity_holder = *member_ranks.last().expect("group_size >= 1");
        Self { index, member_ranks, parity_holder, block_size: DEFAULT_BLOCK_SIZE }
    }

    pub fn position(&self, rank: u32) -> Option<usize> {
        self.member_ranks.iter().position(|&r| r == rank)
    }

    pub fn parity_path(&self, tier: &Path, name: &str, version: u32) -> PathBuf {
        layout::parity_path(tier, self.parity_holder, name, version, self.index)
    }
}

pub fn find_parity(tiers: &[PathBuf], group: &XorGroup, name: &str, version: u32) -> Option<PathBuf> {
    tiers.iter().map(|t| group.parity_path(t, name, version)).find(|p| p.is_file())
}

/// Computes the group parity from every member's L1 artifact and stores it
/// in the parity holder's namespace. Any member may run this; the output
/// depends only on the members' artifacts, so concurrent writers produce
/// identical files.
pub fn xor_protect(
    ckpt: &CheckpointId,
    group_size: u32,
    tiers: &[PathBuf],
    quantum: usize,
) -> Result<PathBuf, ResilienceError> {
    let group = XorGroup::of_rank(ckpt.rank, group_size);
    let mut members = Vec::with_capacity(group.member_ranks.len());
    for &r in &group.member_ranks {
        let id = CheckpointId { rank: r, ..ckpt.clone() };
        let (_, path) = layout::find_l1(tiers, &id).ok_or_else(|| {
            ResilienceError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("L1 artifact of group member {id} not found"),
            ))
        })?;
        members.push(read_throttled(&path, quantum)?);
    }
    let refs: Vec<&[u8]> = members.iter().map(Vec::as_slice).collect();
    let parity = xor_encode_throttled(&refs, group.block_size, quantum)?;
    let encoded = parity.encode();
    let mut last_err = None;
    for tier in tiers {
        let dest = group.parity_path(tier, &ckpt.name, ckpt.version);
        match write_atomic_throttled(&dest, &encoded, quantum) {
            Ok(()) => return Ok(dest),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.map(ResilienceError::Io).unwrap_or(ResilienceError::EmptyGroup))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn equal_pair_gives_zero_parity() {
        let p = [0x5Au8; 33];
        let parity = xor_encode(&[&p, &p], 16).unwrap();
        assert_eq!(parity.parity, vec![0u8; 48]);
        assert_eq!(parity.lengths, vec![33, 33]);
    }

    #[test]
    fn three_single_bytes() {
        let parity = xor_encode(&[&[0x0F], &[0xF0], &[0xFF]], 1).unwrap();
        assert_eq!(parity.parity, vec![0x00]);
    }

    #[test]
    fn k2_self_parity_decodes_to_zeros() {
        let p = vec![0xC3u8; 10];
        let parity = ParityBlock { block_size: 1, lengths: vec![10, 10], parity: p.clone() };
        assert_eq!(xor_decode(&[&p], &parity, 1).unwrap(), vec![0u8; 10]);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn brute_force_all_erasures_k4() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(11);
        let payloads: Vec<Vec<u8>> = (0..4).map(|_| (0..1024).map(|_| rng.random()).collect()).collect();
        let refs: Vec<&[u8]> = payloads.iter().map(Vec::as_slice).collect();
        let parity = xor_encode(&refs, 4096).unwrap();
        // Oracle: direct bytewise definition.
        for i in 0..1024 {
            assert_eq!(parity.parity[i], payloads[0][i] ^ payloads[1][i] ^ payloads[2][i] ^ payloads[3][i]);
        }
        for missing in 0..4 {
            let surv: Vec<&[u8]> = (0..4).filter(|&j| j != missing).map(|j| refs[j]).collect();
            assert_eq!(xor_decode(&surv, &parity, missing).unwrap(), payloads[missing]);
        }
        let two: Vec<&[u8]> = refs[..2].to_vec();
        assert!(matches!(xor_decode(&two, &parity, 3), Err(ResilienceError::TooManyMissing { missing: 2 })));
    }

    #[test]
    fn empty_group() {
        assert!(matches!(xor_encode(&[], 8), Err(ResilienceError::EmptyGroup)));
        assert!(matches!(xor_encode(&[b"a"], 8), Err(ResilienceError::EmptyGroup)));
    }

    #[test]
    fn parity_file_round_trip_and_validation() {
        let parity = xor_encode(&[b"hello", b"wor", b""], 4).unwrap();
        let bytes = parity.encode();
        assert_eq!(&bytes[0..4], b"VCKX");
        assert_eq!(&bytes[4..8], &3u32.to_le_bytes());
        assert_eq!(&bytes[8..16], &4u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &5u64.to_le_bytes());
        assert_eq!(ParityBlock::parse(&bytes).unwrap(), parity);
        assert!(ParityBlock::parse(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn groups() {
        let g = XorGroup::of_rank(5, 4);
        assert_eq!(g.index, 1);
        assert_eq!(g.member_ranks, vec![4, 5, 6, 7]);
        assert_eq!(g.parity_holder, 7);
        assert_eq!(g.position(6), Some(2));
    }
}
