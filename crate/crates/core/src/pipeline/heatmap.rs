//! Attention maps as binary graymaps (PGM `P5`), scaled so the largest
//! weight is white and upsampled by pixel replication.

use std::path::Path;

use crate::error::{Error, Result};

pub const UPSCALE: usize = 16;

/// Grayscale image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graymap {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Graymap {
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm(bytes: &[u8], location: &str) -> Result<Self> {
        let bad = |m: &str| Error::format(location, m.to_owned());
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
        }
        if fields[0] != "P5" {
            return Err(bad("not a binary graymap"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval != 255 {
            return Err(bad("only 8-bit graymaps are supported"));
        }
        // exactly one whitespace byte separates the header from the raster
        let pixels = bytes.get(pos + 1..).unwrap_or_default().to_vec();
        if pixels.len() != width * height {
            return Err(bad("raster size does not match the header"));
        }
        Ok(Graymap { width, height, pixels })
    }
}

/// Maps [0, max] linearly onto [0, 255], rounding to nearest. An all-zero
/// map stays black.
pub fn render(weights: &[f64], rows: usize, cols: usize, scale: usize) -> Result<Graymap> {
    if weights.len() != rows * cols || rows == 0 || cols == 0 || scale == 0 {
        return Err(Error::dim("heatmap", format!("{} weights for a {rows}x{cols} grid at x{scale}", weights.len())));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::contract("heatmap weights must be finite and non-negative"));
    }
    let max = weights.iter().copied().fold(0.0, f64::max);
    let level = |w: f64| if max > 0.0 { (w / max * 255.0).round() as u8 } else { 0 };
    let (width, height) = (cols * scale, rows * scale);
    let mut pixels = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            pixels.push(level(weights[(y / scale) * cols + x / scale]));
        }
    }
    Ok(Graymap { width, height, pixels })
}

pub fn export_heatmap(weights: &[f64], rows: usize, cols: usize, path: &Path) -> Result<()> {
    let img = render(weights, rows, cols, UPSCALE)?;
    std::fs::write(path, img.to_pgm()).map_err(|e| Error::io(path, e))
}

/// `<id>_<step>_<word>.pgm`, with anything outside [A-Za-z0-9-] in the
/// word replaced so reserved tokens stay filesystem-safe.
pub fn heatmap_file_name(id: &str, step: usize, word: &str) -> String {
    let safe: String = word.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect();
    format!("{id}_{step}_{safe}.pgm")
}
