//! RGE1: little-endian embedding dataset file.
//!
//! ```text
//! 0..4    "RGE1"
//! 4..8    u32 record count N
//! 8..12   u32 d_img
//! 12..16  u32 d_txt
//! then N records of:
//!         u64 id, u8 label, 7 zero bytes, d_img x f32, d_txt x f32
//! ```
//! No trailing bytes are allowed.

use std::collections::HashSet;
use std::path::Path;

use super::{EmbeddingDataset, EmbeddingRecord, Label};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RGE1";
pub const HEADER_LEN: usize = 16;

pub(crate) fn record_size(d_img: usize, d_txt: usize) -> usize {
    16 + 4 * (d_img + d_txt)
}

/// Serializes a dataset. The text sidecar is not part of the binary.
pub fn encode_dataset(ds: &EmbeddingDataset) -> Result<Vec<u8>> {
    ds.check_invariants()?;
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::InvariantViolation(format!("{what} {v} exceeds u32")))
    };
    let n = to_u32(ds.records.len(), "record count")?;
    let d_img = to_u32(ds.d_img, "d_img")?;
    let d_txt = to_u32(ds.d_txt, "d_txt")?;

    let mut out = Vec::with_capacity(HEADER_LEN + ds.records.len() * record_size(ds.d_img, ds.d_txt));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&d_img.to_le_bytes());
    out.extend_from_slice(&d_txt.to_le_bytes());
    for r in &ds.records {
        out.extend_from_slice(&r.id.to_le_bytes());
        out.push(r.label.as_u8());
        out.extend_from_slice(&[0u8; 7]);
        for v in r.f_img.iter().chain(&r.f_txt) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Parses an RGE1 byte string. Every malformed input maps to exactly one
/// error, tagged with the offset at which it was detected.
pub fn decode_dataset(bytes: &[u8]) -> Result<EmbeddingDataset> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedFile { offset: bytes.len() as u64, what: "magic".into() });
    }
    if &bytes[..4] != MAGIC {
        if &bytes[..3] == b"RGE" {
            return Err(Error::UnsupportedVersion {
                offset: 3,
                found: String::from_utf8_lossy(&bytes[3..4]).into_owned(),
            });
        }
        return Err(Error::BadMagic { offset: 0, expected: "RGE1" });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedFile { offset: bytes.len() as u64, what: "header".into() });
    }
    let n = read_u32(bytes, 4) as usize;
    let d_img = read_u32(bytes, 8) as usize;
    let d_txt = read_u32(bytes, 12) as usize;
    let rec_size = record_size(d_img, d_txt);

    let body = (bytes.len() - HEADER_LEN) as u128;
    let expected = n as u128 * rec_size as u128;
    if body < expected {
        let complete = body / rec_size as u128;
        let offset = HEADER_LEN as u128 + complete * rec_size as u128;
        return Err(Error::TruncatedFile {
            offset: offset as u64,
            what: format!("header declares {n} records, body holds {complete} complete"),
        });
    }
    if body > expected {
        return Err(Error::DimensionMismatch {
            offset: (HEADER_LEN as u128 + expected) as u64,
            what: format!(
                "{} trailing bytes after {n} records of dims ({d_img}, {d_txt})",
                body - expected
            ),
        });
    }

    let mut records = Vec::with_capacity(n);
    let mut seen = HashSet::with_capacity(n);
    let mut pos = HEADER_LEN;
    for _ in 0..n {
        let base = pos;
        let id = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
        let raw_label = bytes[pos + 8];
        let label = Label::from_u8(raw_label)
            .ok_or(Error::InvalidLabel { offset: (pos + 8) as u64, label: raw_label })?;
        if let Some(k) = bytes[pos + 9..pos + 16].iter().position(|&b| b != 0) {
            return Err(Error::NonZeroPadding { offset: (pos + 9 + k) as u64 });
        }
        pos += 16;
        let mut read_vec = |len: usize| -> Result<Vec<f32>> {
            let mut v = Vec::with_capacity(len);
            for _ in 0..len {
                let x = f32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
                if !x.is_finite() {
                    return Err(Error::NonFiniteValue { offset: pos as u64 });
                }
                v.push(x);
                pos += 4;
            }
            Ok(v)
        };
        let f_img = read_vec(d_img)?;
        let f_txt = read_vec(d_txt)?;
        if !seen.insert(id) {
            return Err(Error::DuplicateId { offset: base as u64, id });
        }
        records.push(EmbeddingRecord { id, label, f_img, f_txt });
    }
    Ok(EmbeddingDataset { d_img, d_txt, records, texts: None })
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

pub fn save_dataset(ds: &EmbeddingDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_dataset(ds)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header(n: u32, d_img: u32, d_txt: u32) -> Vec<u8> {
        let mut b = MAGIC.to_vec();
        for v in [n, d_img, d_txt] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    #[test]
    fn empty_file_round_trips() {
        let bytes = header(0, 4, 4);
        let ds = decode_dataset(&bytes).unwrap();
        assert_eq!((ds.d_img, ds.d_txt, ds.len()), (4, 4, 0));
        let again = encode_dataset(&ds).unwrap();
        assert_eq!(again.len(), 16);
        assert_eq!(again, bytes);
    }

    #[test]
    fn single_record_size() {
        let ds = EmbeddingDataset::new(
            2,
            1,
            vec![EmbeddingRecord { id: 9, label: Label::Hateful, f_img: vec![1.0, 2.0], f_txt: vec![3.0] }],
        )
        .unwrap();
        assert_eq!(encode_dataset(&ds).unwrap().len(), 44);
    }

    #[test]
    fn short_body_is_truncated() {
        let mut bytes = header(2, 1, 1);
        bytes.extend_from_slice(&5u64.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 8]);
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        match decode_dataset(&bytes) {
            Err(Error::TruncatedFile { offset: 40, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = header(0, 1, 1);
        bytes.push(0);
        assert!(matches!(decode_dataset(&bytes), Err(Error::DimensionMismatch { offset: 16, .. })));
    }

    #[test]
    fn magic_and_version() {
        assert!(matches!(decode_dataset(b"XXXX0000000000000"), Err(Error::BadMagic { .. })));
        let mut b = header(0, 1, 1);
        b[3] = b'2';
        assert!(matches!(decode_dataset(&b), Err(Error::UnsupportedVersion { offset: 3, .. })));
        assert!(matches!(decode_dataset(b"RG"), Err(Error::TruncatedFile { offset: 2, .. })));
        assert!(matches!(decode_dataset(b"RGE1\0\0"), Err(Error::TruncatedFile { .. })));
    }

    #[test]
    fn bad_label_padding_and_nan() {
        let mut good = header(1, 1, 0);
        good.extend_from_slice(&1u64.to_le_bytes());
        good.extend_from_slice(&[1, 0, 0, 0, 0, 0, 0, 0]);
        good.extend_from_slice(&0.5f32.to_le_bytes());
        decode_dataset(&good).unwrap();

        let mut b = good.clone();
        b[24] = 2;
        assert!(matches!(decode_dataset(&b), Err(Error::InvalidLabel { offset: 24, label: 2 })));
        let mut b = good.clone();
        b[30] = 1;
        assert!(matches!(decode_dataset(&b), Err(Error::NonZeroPadding { offset: 30 })));
        let mut b = good.clone();
        b[32..36].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(decode_dataset(&b), Err(Error::NonFiniteValue { offset: 32 })));
    }

    #[test]
    fn duplicate_id_in_file() {
        let mut b = header(2, 0, 0);
        for _ in 0..2 {
            b.extend_from_slice(&3u64.to_le_bytes());
            b.extend_from_slice(&[0u8; 8]);
        }
        assert!(matches!(decode_dataset(&b), Err(Error::DuplicateId { offset: 32, id: 3 })));
    }

    fn arb_file() -> impl Strategy<Value = Vec<u8>> {
        (0usize..6, 0usize..5, 0usize..5).prop_flat_map(|(n, d_img, d_txt)| {
            let rec = (any::<u64>(), any::<bool>(), prop::collection::vec(-1e6f32..1e6, d_img + d_txt));
            prop::collection::vec(rec, n).prop_map(move |recs| {
                let mut b = header(recs.len() as u32, d_img as u32, d_txt as u32);
                let mut seen = HashSet::new();
                let mut count = 0u32;
                for (id, hateful, vals) in recs {
                    if !seen.insert(id) {
                        continue;
                    }
                    count += 1;
                    b.extend_from_slice(&id.to_le_bytes());
                    b.push(hateful as u8);
                    b.extend_from_slice(&[0u8; 7]);
                    for v in vals {
                        b.extend_from_slice(&v.to_le_bytes());
                    }
                }
                b[4..8].copy_from_slice(&count.to_le_bytes());
                b
            })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn save_load_is_byte_identity(bytes in arb_file()) {
            let ds = decode_dataset(&bytes).unwrap();
            prop_assert_eq!(encode_dataset(&ds).unwrap(), bytes);
        }

        #[test]
        fn arbitrary_bytes_never_panic(mut bytes in prop::collection::vec(any::<u8>(), 0..80)) {
            if bytes.len() >= 4 && bytes[0] % 2 == 0 {
                bytes[..4].copy_from_slice(MAGIC);
            }
            let _ = decode_dataset(&bytes);
        }
    }
}
