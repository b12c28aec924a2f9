//! Self-describing checkpoint file.
//!
//! Little-endian layout:
//!
//! ```text
//! "VCK1" | format u32 = 1 | rank u32 | version u32 | region count u32
//! per region: id u32 | element_count u64 | element_size u64
//! digest [u8; 32]  (SHA-256 over the payload section)
//! payloads, concatenated in table order
//! ```

use std::fs::File;
use std::io::{self, BufReader, Read, Write};
use std::path::Path;

use sha2::{Digest as _, Sha256};

use super::ResilienceError;
use crate::model::{Digest, RegionDescriptor};

pub const MAGIC: &[u8; 4] = b"VCK1";
pub const FORMAT_VERSION: u32 = 1;
pub const FIXED_HEADER_LEN: usize = 20;
pub const REGION_ENTRY_LEN: usize = 20;
pub const DIGEST_LEN: usize = 32;

/// Upper bound on the region table read from disk, to reject absurd counts
/// before allocating.
const MAX_REGIONS: u32 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArtifactHeader {
    pub rank: u32,
    pub version: u32,
    pub regions: Vec<RegionDescriptor>,
    pub digest: Digest,
}

impl ArtifactHeader {
    pub fn header_len(&self) -> usize {
        FIXED_HEADER_LEN + REGION_ENTRY_LEN * self.regions.len() + DIGEST_LEN
    }

    pub fn payload_len(&self) -> u64 {
        self.regions.iter().map(RegionDescriptor::byte_length).sum()
    }

    pub fn file_len(&self) -> u64 {
        self.header_len() as u64 + self.payload_len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.header_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.rank.to_le_bytes());
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.regions.len() as u32).to_le_bytes());
        for r in &self.regions {
            out.extend_from_slice(&r.region_id.to_le_bytes());
            out.extend_from_slice(&r.element_count.to_le_bytes());
            out.extend_from_slice(&r.element_size.to_le_bytes());
        }
        out.extend_from_slice(&self.digest.0);
        out
    }

    /// Reads and validates the header from `reader`.
    pub fn read_from(reader: &mut impl Read) -> Result<Self, ResilienceError> {
        let malformed = |what: &str| ResilienceError::Malformed(what.to_string());
        let mut fixed = [0u8; FIXED_HEADER_LEN];
        read_exact_or_malformed(reader, &mut fixed, "truncated header")?;
        if &fixed[0..4] != MAGIC {
            return Err(malformed("bad magic"));
        }
        let u32_at = |b: &[u8], o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        let u64_at = |b: &[u8], o: usize| u64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        if u32_at(&fixed, 4) != FORMAT_VERSION {
            return Err(malformed("unsupported format version"));
        }
        let rank = u32_at(&fixed, 8);
        let version = u32_at(&fixed, 12);
        let count = u32_at(&fixed, 16);
        if count > MAX_REGIONS {
            return Err(malformed("region count out of range"));
        }
        let mut table = vec![0u8; count as usize * REGION_ENTRY_LEN];
        read_exact_or_malformed(reader, &mut table, "truncated region table")?;
        let mut regions = Vec::with_capacity(count as usize);
        for e in table.chunks_exact(REGION_ENTRY_LEN) {
            let r = RegionDescriptor::new(u32_at(e, 0), u64_at(e, 4), u64_at(e, 12))
                .map_err(|_| malformed("zero-sized region"))?;
            if r.element_count.checked_mul(r.element_size).is_none() {
                return Err(malformed("region size overflow"));
            }
            regions.push(r);
        }
        let mut digest = [0u8; DIGEST_LEN];
        read_exact_or_malformed(reader, &mut digest, "truncated digest")?;
        Ok(Self { rank, version, regions, digest: Digest(digest) })
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, ResilienceError> {
        Self::read_from(&mut &bytes[..])
    }
}

fn read_exact_or_malformed(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<(), ResilienceError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            ResilienceError::Malformed(what.to_string())
        } else {
            ResilienceError::Io(e)
        }
    })
}

/// Writes header and payloads to `w`. Payload order must match the table.
pub fn write_artifact(w: &mut impl Write, header: &ArtifactHeader, payloads: &[&[u8]]) -> io::Result<()> {
    w.write_all(&header.encode())?;
    for p in payloads {
        w.write_all(p)?;
    }
    Ok(())
}

pub fn encode_artifact(header: &ArtifactHeader, payloads: &[&[u8]]) -> Vec<u8> {
    let mut out = Vec::with_capacity(header.file_len() as usize);
    write_artifact(&mut out, header, payloads).expect("vec write");
    out
}

/// Outcome of checking a full artifact image.
fn check_payload(header: &ArtifactHeader, payload_digest: Digest, payload_len: u64) -> Result<bool, ResilienceError> {
    if payload_len != header.payload_len() {
        return Err(ResilienceError::Malformed(format!(
            "payload is {payload_len} bytes, table says {}",
            header.payload_len()
        )));
    }
    Ok(payload_digest == header.digest)
}

/// Verifies an in-memory artifact image. `Err(Malformed)` for structural
/// damage, `Ok(false)` for a digest mismatch.
pub fn verify_bytes(bytes: &[u8]) -> Result<ArtifactHeader, ResilienceError> {
    let header = ArtifactHeader::parse(bytes)?;
    let payload = &bytes[header.header_len()..];
    let digest = Digest(Sha256::digest(payload).into());
    if check_payload(&header, digest, payload.len() as u64)? {
        Ok(header)
    } else {
        Err(ResilienceError::VerifyFailed("digest mismatch".into()))
    }
}

/// True iff the stored digest equals the digest of the payload section.
/// Unreadable or structurally damaged files are errors, not `false`.
pub fn verify_artifact(path: &Path) -> Result<bool, ResilienceError> {
    let mut r = BufReader::with_capacity(1 << 20, File::open(path)?);
    let header = ArtifactHeader::read_from(&mut r)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    let mut len = 0u64;
    loop {
        let n = r.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        len += n as u64;
    }
    check_payload(&header, Digest(hasher.finalize().into()), len)
}

pub fn read_header(path: &Path) -> Result<ArtifactHeader, ResilienceError> {
    ArtifactHeader::read_from(&mut BufReader::new(File::open(path)?))
}

/// Splits a verified image into per-region payload slices.
pub fn split_payloads<'a>(header: &ArtifactHeader, bytes: &'a [u8]) -> Vec<&'a [u8]> {
    let mut off = header.header_len();
    header
        .regions
        .iter()
        .map(|r| {
            let len = r.byte_length() as usize;
            let s = &bytes[off..off + len];
            off += len;
            s
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::manifest_digest;

    fn sample() -> (ArtifactHeader, Vec<Vec<u8>>) {
        let payloads = vec![vec![1u8; 16], vec![2u8; 16]];
        let header = ArtifactHeader {
            rank: 3,
            version: 7,
            regions: vec![RegionDescriptor::new(0, 4, 4).unwrap(), RegionDescriptor::new(9, 16, 1).unwrap()],
            digest: manifest_digest(&payloads),
        };
        (header, payloads)
    }

    #[test]
    fn layout_is_bit_exact() {
        let (h, p) = sample();
        let refs: Vec<&[u8]> = p.iter().map(Vec::as_slice).collect();
        let bytes = encode_artifact(&h, &refs);
        assert_eq!(bytes.len(), 20 + 2 * 20 + 32 + 32);
        assert_eq!(&bytes[0..4], b"VCK1");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &7u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &0u32.to_le_bytes());
        assert_eq!(&bytes[24..32], &4u64.to_le_bytes());
        assert_eq!(&bytes[32..40], &4u64.to_le_bytes());
        assert_eq!(&bytes[40..44], &9u32.to_le_bytes());
        assert_eq!(&bytes[60..92], &h.digest.0);
        assert_eq!(&bytes[92..108], &[1u8; 16]);
        assert_eq!(ArtifactHeader::parse(&bytes).unwrap(), h);
        assert_eq!(verify_bytes(&bytes).unwrap(), h);
        assert_eq!(split_payloads(&h, &bytes), refs);
    }

    #[test]
    fn verify_distinguishes_corrupt_from_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let (h, p) = sample();
        let refs: Vec<&[u8]> = p.iter().map(Vec::as_slice).collect();
        let bytes = encode_artifact(&h, &refs);
        let path = dir.path().join("a.ckpt");
        std::fs::write(&path, &bytes).unwrap();
        assert!(verify_artifact(&path).unwrap());

        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 0x01;
        std::fs::write(&path, &flipped).unwrap();
        assert!(!verify_artifact(&path).unwrap());

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(verify_artifact(&path), Err(ResilienceError::Malformed(_))));

        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(verify_artifact(&path), Err(ResilienceError::Malformed(_))));

        assert!(matches!(verify_artifact(&dir.path().join("missing")), Err(ResilienceError::Io(_))));
    }
}
