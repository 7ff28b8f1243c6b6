//! Binary feature files.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! header   magic "MMLQFEAT" | version u32 | sample_count u64
//!          | n_visual u32 | h_v u32 | n_w u32 | h_t u32 | k_bins u32 | flags u32
//! record   sample_id u64 | visual [n_visual·h_v] | textual [n_w·h_t]
//!          | gt_dos [k_bins] | valid_token_count u32
//! trailer  crc32 u32 over every preceding byte
//! ```
//!
//! Floats are f32, or f64 when flag bit 0 is set.

use std::path::Path;

use super::{Dataset, FeatureDims, SampleRecord};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"MMLQFEAT";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 8 + 4 + 8 + 6 * 4;
const FLAG_WIDE: u32 = 1;

fn record_len(d: &FeatureDims, wide: bool) -> usize {
    let w = if wide { 8 } else { 4 };
    8 + w * (d.visual_len() + d.textual_len() + d.k_bins) + 4
}

fn u32_field(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Validation(format!("{what} {v} does not fit in u32")))
}

/// Serialize a validated dataset.
pub fn to_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let d = &ds.dims;
    let mut out = Vec::with_capacity(HEADER_LEN + ds.len() * record_len(d, ds.wide) + 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    for (v, name) in [(d.n_visual, "n_visual"), (d.h_v, "h_v"), (d.n_w, "n_w"), (d.h_t, "h_t"), (d.k_bins, "k_bins")] {
        out.extend_from_slice(&u32_field(v, name)?.to_le_bytes());
    }
    let flags = if ds.wide { FLAG_WIDE } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    for r in &ds.records {
        out.extend_from_slice(&r.sample_id.to_le_bytes());
        for &x in r.visual.iter().chain(&r.textual).chain(&r.gt_dos) {
            if ds.wide {
                out.extend_from_slice(&x.to_le_bytes());
            } else {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out.extend_from_slice(&r.valid_token_count.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let b: [u8; N] = self.buf[self.pos..self.pos + N].try_into().expect("length checked");
        self.pos += N;
        b
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }

    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }

    fn floats(&mut self, n: usize, wide: bool) -> Vec<f64> {
        (0..n)
            .map(|_| if wide { f64::from_le_bytes(self.take()) } else { f32::from_le_bytes(self.take()) as f64 })
            .collect()
    }
}

/// Parse and validate a feature file image.
pub fn from_bytes(buf: &[u8]) -> Result<Dataset> {
    if buf.len() < MAGIC.len() {
        return Err(Error::Truncated { expected: HEADER_LEN as u64, actual: buf.len() as u64 });
    }
    if buf[..8] != MAGIC {
        return Err(Error::BadMagic { expected: MAGIC, found: buf[..8].try_into().expect("8 bytes") });
    }
    if buf.len() < HEADER_LEN {
        return Err(Error::Truncated { expected: HEADER_LEN as u64, actual: buf.len() as u64 });
    }
    let mut c = Cursor { buf, pos: 8 };
    let version = c.u32();
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion { found: version, supported: FORMAT_VERSION });
    }
    let count = c.u64();
    let dims = FeatureDims {
        n_visual: c.u32() as usize,
        h_v: c.u32() as usize,
        n_w: c.u32() as usize,
        h_t: c.u32() as usize,
        k_bins: c.u32() as usize,
    };
    let flags = c.u32();
    if flags & !FLAG_WIDE != 0 {
        return Err(Error::Format(format!("unknown flag bits {flags:#x}")));
    }
    let wide = flags & FLAG_WIDE != 0;
    dims.validate()?;
    let expected = (record_len(&dims, wide) as u128)
        .checked_mul(count as u128)
        .map(|r| r + HEADER_LEN as u128 + 4)
        .filter(|&e| e <= u64::MAX as u128)
        .ok_or_else(|| Error::Format(format!("declared size overflows ({count} samples)")))? as u64;
    let actual = buf.len() as u64;
    if actual < expected {
        return Err(Error::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(Error::TrailingData { expected, actual });
    }
    let body = &buf[..buf.len() - 4];
    let stored = u32::from_le_bytes(buf[buf.len() - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let sample_id = c.u64();
        let visual = c.floats(dims.visual_len(), wide);
        let textual = c.floats(dims.textual_len(), wide);
        let gt_dos = c.floats(dims.k_bins, wide);
        let valid_token_count = c.u32();
        records.push(SampleRecord { sample_id, visual, textual, gt_dos, valid_token_count });
    }
    let ds = Dataset { dims, wide, records };
    ds.validate()?;
    Ok(ds)
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(ds)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SynthConfig};

    fn small(wide: bool) -> Dataset {
        let cfg = SynthConfig {
            n_samples: 3,
            n_visual: 3,
            h_v: 4,
            n_w: 5,
            h_t: 2,
            k_bins: 4,
            ..SynthConfig::desk(11)
        };
        let mut ds = gen_synthetic(&cfg, 0).unwrap();
        ds.wide = wide;
        ds
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for wide in [false, true] {
            let mut ds = small(wide);
            if wide {
                // values that f32 cannot hold
                ds.records[0].visual[0] = 0.1;
                ds.records[1].textual[1] = std::f64::consts::PI;
            }
            let bytes = to_bytes(&ds).unwrap();
            let back = from_bytes(&bytes).unwrap();
            assert_eq!(back, ds);
            for (a, b) in back.records.iter().zip(&ds.records) {
                let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&a.visual), bits(&b.visual));
                assert_eq!(bits(&a.textual), bits(&b.textual));
                assert_eq!(bits(&a.gt_dos), bits(&b.gt_dos));
            }
        }
    }

    #[test]
    fn layout_sizes() {
        let ds = small(false);
        let bytes = to_bytes(&ds).unwrap();
        let rec = 8 + 4 * (3 * 4 + 5 * 2 + 4) + 4;
        assert_eq!(bytes.len(), HEADER_LEN + 3 * rec + 4);
        assert_eq!(&bytes[..8], b"MMLQFEAT");
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 3);
    }

    #[test]
    fn corrupt_payload_byte_fails_checksum() {
        let bytes = to_bytes(&small(false)).unwrap();
        for pos in [HEADER_LEN, HEADER_LEN + 17, bytes.len() - 5, bytes.len() - 1] {
            let mut b = bytes.clone();
            b[pos] ^= 0x40;
            assert!(matches!(from_bytes(&b), Err(Error::Checksum { .. })), "byte {pos}");
        }
    }

    #[test]
    fn distinct_header_errors() {
        let bytes = to_bytes(&small(false)).unwrap();
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(matches!(from_bytes(&b), Err(Error::BadMagic { .. })));
        let mut b = bytes.clone();
        b[8] = 2;
        assert!(matches!(from_bytes(&b), Err(Error::UnsupportedVersion { found: 2, .. })));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 9]), Err(Error::Truncated { .. })));
        assert!(matches!(from_bytes(&bytes[..20]), Err(Error::Truncated { .. })));
        assert!(matches!(from_bytes(&bytes[..3]), Err(Error::Truncated { .. })));
        let mut b = bytes.clone();
        b.push(0);
        assert!(matches!(from_bytes(&b), Err(Error::TrailingData { .. })));
        // header declares one more sample than the payload holds
        let mut b = bytes.clone();
        b[12] = 4;
        assert!(matches!(from_bytes(&b), Err(Error::Truncated { .. })));
        let mut b = bytes;
        b[40] = 2;
        assert!(matches!(from_bytes(&b), Err(Error::Format(_))));
    }

    #[test]
    fn refuses_invalid_records() {
        let mut ds = small(false);
        ds.records[0].gt_dos[0] = 0.9;
        assert!(matches!(to_bytes(&ds), Err(Error::Validation(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.feat");
        let ds = small(false);
        write_dataset(&path, &ds).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), ds);
        assert!(matches!(read_dataset(dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
