//! Little-endian image container:
//! `"AEIB"`, u32 version, u32 N, C, H, W, N·C·H·W u8 pixels, N u16 labels,
//! u32 class_count.

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"AEIB";
const VERSION: u32 = 1;

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.class_count > usize::from(u16::MAX) + 1 {
        return Err(Error::Format(format!(
            "{} classes do not fit u16 labels",
            ds.class_count
        )));
    }
    let mut out = Vec::with_capacity(28 + ds.pixels.len() + 2 * ds.len());
    out.extend_from_slice(MAGIC);
    for v in [VERSION as usize, ds.len(), ds.channels, ds.height, ds.width] {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&ds.pixels);
    for &l in &ds.labels {
        out.extend_from_slice(&(l as u16).to_le_bytes());
    }
    out.extend_from_slice(&(ds.class_count as u32).to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format(format!("truncated container while reading {what}")));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, expected \"AEIB\"".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let (n, c, h, w) = (r.u32("N")?, r.u32("C")?, r.u32("H")?, r.u32("W")?);
    let pixel_count = n
        .checked_mul(c)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::Format("image dimensions overflow".into()))?;
    let pixels = r.take(pixel_count, "pixels")?.to_vec();
    let labels = r
        .take(2 * n, "labels")?
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]) as usize)
        .collect();
    let class_count = r.u32("class_count")?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after container",
            bytes.len() - r.pos
        )));
    }
    Dataset::new((c, h, w), pixels, labels, class_count).map_err(|e| match e {
        Error::Label(m) => Error::Label(m),
        other => Error::Format(other.to_string()),
    })
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, encode_dataset(ds)?).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ds = decode_dataset(&bytes)?;
    log::info!(
        "loaded {} ({} samples, class histogram {:?})",
        path.display(),
        ds.len(),
        ds.histogram()
    );
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;

    #[test]
    fn hand_built_fixture_decodes() {
        let mut bytes = b"AEIB".to_vec();
        for v in [1u32, 2, 1, 1, 2] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&[7, 200, 0, 255]);
        bytes.extend_from_slice(&[1, 0, 0, 0]);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        let ds = decode_dataset(&bytes).unwrap();
        assert_eq!((ds.channels, ds.height, ds.width), (1, 1, 2));
        assert_eq!(ds.pixels, vec![7, 200, 0, 255]);
        assert_eq!(ds.labels, vec![1, 0]);
        assert_eq!(ds.class_count, 2);
        assert_eq!(encode_dataset(&ds).unwrap(), bytes);
    }

    #[test]
    fn round_trip_through_file() {
        let ds = generate_synthetic(3, 4, (3, 8, 8), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.aeib");
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn corrupted_inputs_are_format_errors() {
        let ds = generate_synthetic(2, 2, (3, 4, 4), 1).unwrap();
        let good = encode_dataset(&ds).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_dataset(&bad_magic), Err(Error::Format(_))));

        let truncated = &good[..good.len() - 3];
        assert!(matches!(decode_dataset(truncated), Err(Error::Format(_))));

        let mut bad_label = good.clone();
        let label_at = good.len() - 4 - 2 * ds.len();
        bad_label[label_at] = 9;
        assert!(matches!(decode_dataset(&bad_label), Err(Error::Label(_))));
    }
}
