//! `CKPT` checkpoints: magic, u32 version, u32 block count, then named
//! blocks (u32 name length, name, u32 rank, u32 extents, little-endian f64
//! payload). Holds the model, the Adam moments and a few scalar metadata
//! entries, so training can resume exactly where it stopped.

use std::path::Path;

use crate::captioner::{block_names, CaptionerParams};
use crate::error::{Error, Result};
use crate::pipeline::adam::AdamState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: CaptionerParams,
    pub adam: AdamState,
    /// Last completed epoch.
    pub epoch: u64,
    pub seed: u64,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_block(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank());
    for &d in t.shape() {
        put_u32(out, d);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    location: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.location, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn block(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32()?;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::format(self.location, "block name is not UTF-8"))?;
        let rank = self.u32()?;
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.location, "block too large"))?)?;
        let data: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(self.location, format!("block {name} holds a non-finite value")));
        }
        Ok((name, Tensor::new(shape, data)?))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let blocks = self.params.named_blocks();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION as usize);
        put_u32(&mut out, 3 * blocks.len() + 3);
        for (name, t) in &blocks {
            put_block(&mut out, name, t);
        }
        for (prefix, buffers) in [("adam.m.", &self.adam.m), ("adam.v.", &self.adam.v)] {
            for ((name, t), buf) in blocks.iter().zip(buffers) {
                let moment = Tensor::new(t.shape().to_vec(), buf.clone()).expect("moment shaped like its block");
                put_block(&mut out, &format!("{prefix}{name}"), &moment);
            }
        }
        for (name, v) in [("meta.adam_step", self.adam.step), ("meta.epoch", self.epoch), ("meta.seed", self.seed)] {
            put_block(&mut out, name, &Tensor::scalar(v as f64));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], location: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, location };
        if r.take(4)? != MAGIC {
            return Err(Error::format(location, "missing CKPT magic"));
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(Error::format(location, format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()?;
        let mut blocks = Vec::new();
        for _ in 0..count {
            blocks.push(r.block()?);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(location, "trailing bytes after the last block"));
        }
        let mut take = |name: &str| -> Result<Tensor> {
            let i = blocks
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::format(location, format!("missing block {name}")))?;
            Ok(blocks.remove(i).1)
        };
        let names = block_names();
        let params = names.iter().map(|n| take(n)).collect::<Result<Vec<_>>>()?;
        let params = CaptionerParams::from_blocks(params).map_err(|e| Error::format(location, e.to_string()))?;
        let mut moments = |prefix: &str| -> Result<Vec<Vec<f64>>> {
            names
                .iter()
                .zip(params.named_blocks())
                .map(|(n, (_, p))| {
                    let t = take(&format!("{prefix}{n}"))?;
                    if t.shape() != p.shape() {
                        return Err(Error::format(location, format!("{prefix}{n} is shaped unlike its block")));
                    }
                    Ok(t.into_data())
                })
                .collect()
        };
        let m = moments("adam.m.")?;
        let v = moments("adam.v.")?;
        let mut meta = |name: &str| -> Result<u64> {
            let t = take(name)?;
            let x = if t.rank() == 0 { t.item() } else { -1.0 };
            if x < 0.0 || x.fract() != 0.0 || x > (1u64 << 53) as f64 {
                return Err(Error::format(location, format!("{name} is not a non-negative integer")));
            }
            Ok(x as u64)
        };
        let step = meta("meta.adam_step")?;
        let epoch = meta("meta.epoch")?;
        let seed = meta("meta.seed")?;
        if let Some((extra, _)) = blocks.first() {
            return Err(Error::format(location, format!("unexpected block {extra}")));
        }
        Ok(Checkpoint { params, adam: AdamState { m, v, step }, epoch, seed })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::captioner::CaptionerDims;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = CaptionerDims { feature_dim: 4, enc_dim: 3, dec_dim: 5, embed_dim: 2, attn_dim: 4, vocab_size: 7 };
        let params = CaptionerParams::init(dims, &mut rng);
        let mut adam = AdamState::for_blocks(&params.named_blocks().iter().map(|(_, t)| *t).collect::<Vec<_>>());
        adam.m[3][1] = 0.25;
        adam.v[18][0] = 1e-300;
        adam.step = 41;
        Checkpoint { params, adam, epoch: 7, seed: 12345 }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, "c").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        c.save(&p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
        assert_eq!(Checkpoint::load(&p).unwrap().to_bytes(), bytes);
    }

    #[test]
    fn layout_starts_with_the_first_block() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"CKPT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3 * 19 + 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 8);
        assert_eq!(&bytes[16..24], b"enc_proj");
        assert_eq!(u32::from_le_bytes(bytes[24..28].try_into().unwrap()), 2);
    }

    #[test]
    fn rejects_damage() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], "c").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, "c").is_err());
        let mut magic = bytes.clone();
        magic[1] = b'X';
        assert!(Checkpoint::from_bytes(&magic, "c").is_err());
        let mut name = bytes;
        name[16] = b'x';
        assert!(Checkpoint::from_bytes(&name, "c").is_err());
    }
}
