//! `darlpack`: a flat little-endian pack of equally sized 8-bit images.
//!
//! ```text
//! "DRLP" | u32 version = 1 | u32 count | u16 H | u16 W | u8 C | u8 label_bytes (0 or 4)
//! count x ( H*W*C u8 pixels, row-major (y, x, c) | u32 label if label_bytes = 4 )
//! ```

use std::fs;
use std::path::Path;

use super::pnm::quantize;
use super::ImageRecord;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DRLP";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 18;

pub fn encode(records: &[ImageRecord]) -> Result<Vec<u8>> {
    let first = records
        .first()
        .ok_or_else(|| Error::invalid("cannot pack an empty dataset"))?;
    let (h, w, c) = (first.height(), first.width(), first.channels());
    if h > u16::MAX as usize || w > u16::MAX as usize || c > u8::MAX as usize {
        return Err(Error::invalid(format!("image {h}x{w}x{c} too large for darlpack")));
    }
    let labeled = first.label.is_some();
    if records.iter().any(|r| r.label.is_some() != labeled) {
        return Err(Error::invalid("darlpack needs all records labeled or none"));
    }
    if records.iter().any(|r| r.pixels.shape() != first.pixels.shape()) {
        return Err(Error::invalid("darlpack records must share one image shape"));
    }
    let count = u32::try_from(records.len()).map_err(|_| Error::invalid("too many records"))?;
    let label_bytes: u8 = if labeled { 4 } else { 0 };
    let mut out = Vec::with_capacity(HEADER_LEN + records.len() * (h * w * c + 4));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&(h as u16).to_le_bytes());
    out.extend_from_slice(&(w as u16).to_le_bytes());
    out.push(c as u8);
    out.push(label_bytes);
    for r in records {
        out.extend(r.pixels.data().iter().map(|&v| quantize(v)));
        if let Some(l) = r.label {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<ImageRecord>> {
    let need = |offset: usize, len: usize, what: &str| -> Result<()> {
        if bytes.len() < offset + len {
            Err(Error::format(
                path,
                bytes.len() as u64,
                format!("truncated {what}: expected {len} bytes at offset {offset}"),
            ))
        } else {
            Ok(())
        }
    };
    need(0, HEADER_LEN, "header")?;
    if &bytes[..4] != MAGIC {
        return Err(Error::format(path, 0, "bad magic, expected DRLP"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap()) as usize;
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let count = u32_at(8) as usize;
    let (h, w, c) = (u16_at(12), u16_at(14), bytes[16] as usize);
    let label_bytes = bytes[17] as usize;
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::format(path, 12, "zero image dimension"));
    }
    if label_bytes != 0 && label_bytes != 4 {
        return Err(Error::format(path, 17, format!("label_bytes {label_bytes} is not 0 or 4")));
    }
    let n = h * w * c;
    let mut records = Vec::with_capacity(count);
    let mut pos = HEADER_LEN;
    for i in 0..count {
        need(pos, n + label_bytes, &format!("record {i}"))?;
        let data = bytes[pos..pos + n].iter().map(|&b| b as f64 / 255.0).collect();
        pos += n;
        let label = (label_bytes == 4).then(|| u32_at(pos));
        pos += label_bytes;
        records.push(ImageRecord {
            pixels: Tensor::new(vec![h, w, c], data)?,
            label,
        });
    }
    if pos != bytes.len() {
        return Err(Error::format(path, pos as u64, "trailing bytes after last record"));
    }
    Ok(records)
}

pub fn write(path: &Path, records: &[ImageRecord]) -> Result<()> {
    fs::write(path, encode(records)?).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<ImageRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patch::synthetic::{generate, SyntheticSpec};

    #[test]
    fn roundtrip_labeled() {
        let recs = generate(&SyntheticSpec::new(5, 8, 3, 4));
        let bytes = encode(&recs).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 5 * (8 * 8 * 3 + 4));
        assert_eq!(decode(&bytes, Path::new("p")).unwrap(), recs);
    }

    #[test]
    fn truncation_and_version() {
        let recs = generate(&SyntheticSpec::new(2, 4, 1, 4));
        let bytes = encode(&recs).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        match decode(cut, Path::new("p")) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, cut.len() as u64),
            other => panic!("{other:?}"),
        }
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode(&v2, Path::new("p")), Err(Error::Version { found: 2, .. })));
    }

    #[test]
    fn mixed_labels_rejected() {
        let mut recs = generate(&SyntheticSpec::new(2, 4, 1, 4));
        recs[1].label = None;
        assert!(encode(&recs).is_err());
    }
}
