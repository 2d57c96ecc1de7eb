//! `FGRD` feature files: magic, u32 version, u32 H, W, D, then H·W·D
//! little-endian f64 values in (row, col, channel) order.

use std::io::Write;
use std::path::Path;

use crate::captioner::FeatureGrid;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FGRD";
pub const VERSION: u32 = 1;

pub fn to_bytes(grid: &FeatureGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 8 * grid.values().len());
    out.extend_from_slice(MAGIC);
    for v in [VERSION, grid.rows() as u32, grid.cols() as u32, grid.depth() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in grid.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn from_bytes(bytes: &[u8], location: &str) -> Result<FeatureGrid> {
    let bad = |m: String| Error::format(location, m);
    if bytes.len() < 20 {
        return Err(bad("truncated header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("missing FGRD magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    if word(0) != VERSION as usize {
        return Err(bad(format!("unsupported version {}", word(0))));
    }
    let (h, w, d) = (word(1), word(2), word(3));
    let expected = h.checked_mul(w).and_then(|x| x.checked_mul(d)).and_then(|x| x.checked_mul(8));
    if expected != Some(bytes.len() - 20) {
        return Err(bad(format!("payload of {} bytes does not match {h}x{w}x{d}", bytes.len() - 20)));
    }
    let values = bytes[20..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    FeatureGrid::new(h, w, d, values).map_err(|e| bad(e.to_string()))
}

pub fn save(grid: &FeatureGrid, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&to_bytes(grid)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<FeatureGrid> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> FeatureGrid {
        FeatureGrid::new(2, 3, 2, (0..12).map(|i| i as f64 * 0.25 - 1.0).collect()).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let g = grid();
        let bytes = to_bytes(&g);
        assert_eq!(&bytes[..4], b"FGRD");
        assert_eq!(bytes.len(), 20 + 12 * 8);
        assert_eq!(from_bytes(&bytes, "x").unwrap(), g);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.fgrd");
        save(&g, &p).unwrap();
        assert_eq!(load(&p).unwrap(), g);
    }

    #[test]
    fn rejects_damage() {
        let bytes = to_bytes(&grid());
        assert!(from_bytes(&bytes[..bytes.len() - 1], "x").is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(from_bytes(&wrong, "x").is_err());
        let mut version = bytes.clone();
        version[4] = 2;
        assert!(from_bytes(&version, "x").is_err());
        let mut nan = bytes;
        nan[20..28].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(from_bytes(&nan, "x").is_err());
        assert!(matches!(load(Path::new("/nonexistent/g.fgrd")), Err(Error::Io { .. })));
    }
}
