//! `LPX1` dataset pack files and the CSV manifest written beside them.
//!
//! Layout (little-endian): magic `LPX1` | version u16 | D u16 | angle step
//! in millidegrees u32 | image count u32 | conflict count u32, then per image
//! id u32 | canonical angle in millidegrees u32 | L u16 | label u8 |
//! reserved u8 | `ceil(D²/8)` bytes of row-major MSB-first pixels.

use std::fmt::Write as _;
use std::path::Path;

use super::{label_of_mdeg, Dataset, LineImage, ManifoldPoint, HALF_TURN_MDEG};
use crate::bits::{packed_len, BitGrid};
use crate::error::{Error, Result};
use crate::fsutil::{atomic_write, fmt_mdeg, read_bytes, sha256_hex};

pub const DATASET_MAGIC: &[u8; 4] = b"LPX1";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 2 + 4 + 4 + 4;
const RECORD_HEAD_LEN: usize = 4 + 4 + 2 + 1 + 1;

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let plen = packed_len(ds.dim);
    let mut out = Vec::with_capacity(HEADER_LEN + ds.images.len() * (RECORD_HEAD_LEN + plen));
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.dim as u16).to_le_bytes());
    out.extend_from_slice(&ds.angle_step_mdeg.to_le_bytes());
    out.extend_from_slice(&(ds.images.len() as u32).to_le_bytes());
    out.extend_from_slice(&ds.conflict_count.to_le_bytes());
    for img in &ds.images {
        out.extend_from_slice(&img.id.to_le_bytes());
        out.extend_from_slice(&img.canonical.angle_mdeg.to_le_bytes());
        out.extend_from_slice(&(img.canonical.length_px as u16).to_le_bytes());
        out.push(img.label);
        out.push(0);
        out.extend_from_slice(img.bits.as_packed());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "{what} needs {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_dataset(bytes: &[u8], path: &Path) -> Result<Dataset> {
    if bytes.len() < 4 || &bytes[..4] != DATASET_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "LPX1",
        });
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let dim = r.u16("dimension")? as usize;
    let step = r.u32("angle step")?;
    let count = r.u32("image count")? as usize;
    let conflicts = r.u32("conflict count")?;
    if dim < 4 || step == 0 || HALF_TURN_MDEG % step != 0 {
        return Err(Error::Corrupt(format!("bad header D={dim} step={step}")));
    }
    let plen = packed_len(dim);
    let mut images = Vec::with_capacity(count.min(1 << 20));
    for k in 0..count {
        let id = r.u32("image id")?;
        let angle = r.u32("angle")?;
        let length = u32::from(r.u16("length")?);
        let label = r.take(2, "label")?[0];
        let packed = r.take(plen, "pixels")?.to_vec();
        if id as usize != k {
            return Err(Error::Corrupt(format!("image {k} carries id {id}")));
        }
        if angle >= HALF_TURN_MDEG || label != label_of_mdeg(angle) {
            return Err(Error::Corrupt(format!("image {id} has inconsistent angle/label")));
        }
        let bits = BitGrid::from_packed(dim, packed)
            .ok_or_else(|| Error::Corrupt(format!("image {id} has padding bits set")))?;
        let popcount = bits.count_ones();
        images.push(LineImage {
            id,
            bits,
            canonical: ManifoldPoint::from_mdeg(length, angle),
            label,
            popcount,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Dataset::from_parts(dim, step, images, conflicts)
}

/// Writes the pack file atomically and returns its SHA-256 digest, which
/// equals the dataset's `content_hash`.
pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<String> {
    let bytes = encode_dataset(ds);
    atomic_write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = read_bytes(path)?;
    decode_dataset(&bytes, path)
}

/// `id,alpha_deg,length,label,popcount` table.
pub fn write_manifest_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut s = String::from("id,alpha_deg,length,label,popcount\n");
    for img in &ds.images {
        writeln!(
            s,
            "{},{},{},{},{}",
            img.id,
            fmt_mdeg(img.canonical.angle_mdeg),
            img.canonical.length_px,
            img.label,
            img.popcount
        )
        .unwrap();
    }
    atomic_write(path, s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linegen::generate_dataset;

    #[test]
    fn round_trip_and_digest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.lpx");
        let ds = generate_dataset(16, 2.0).unwrap();
        let digest = write_dataset(&ds, &path).unwrap();
        assert_eq!(digest, ds.content_hash);
        let back = read_dataset(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(generate_dataset(16, 2.0).unwrap().content_hash, digest);
    }

    #[test]
    fn error_kinds() {
        let ds = generate_dataset(16, 2.0).unwrap();
        let bytes = encode_dataset(&ds);
        let p = Path::new("x");

        let cut = &bytes[..bytes.len() - 5];
        assert!(matches!(decode_dataset(cut, p), Err(Error::Truncated(_))));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad, p), Err(Error::BadMagic { .. })));

        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(matches!(
            decode_dataset(&ver, p),
            Err(Error::VersionMismatch { found: 9, .. })
        ));

        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(decode_dataset(&extra, p), Err(Error::Corrupt(_))));
    }
}
