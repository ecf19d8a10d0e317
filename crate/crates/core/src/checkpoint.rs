//! Versioned binary checkpoints: ASCII magic `WTKR`, a little-endian format
//! version, structured-text metadata (config hash, epoch, seed), then layer
//! shapes and little-endian 8-byte floats. Round trips are bitwise exact.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{Head, ModelParams};

pub const MAGIC: &[u8; 4] = b"WTKR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub epoch: u64,
    pub seed: u64,
}

impl CheckpointMeta {
    fn to_text(&self) -> String {
        format!(
            "config_hash={}\nepoch={}\nseed={}\n",
            self.config_hash, self.epoch, self.seed
        )
    }

    fn from_text(text: &str) -> Result<Self> {
        let mut config_hash = None;
        let mut epoch = None;
        let mut seed = None;
        for line in text.lines() {
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("metadata line '{line}' lacks '='")))?;
            match key {
                "config_hash" => config_hash = Some(value.to_string()),
                "epoch" => {
                    epoch = Some(value.parse().map_err(|_| {
                        Error::invalid(format!("metadata epoch '{value}' not an integer"))
                    })?)
                }
                "seed" => {
                    seed = Some(value.parse().map_err(|_| {
                        Error::invalid(format!("metadata seed '{value}' not an integer"))
                    })?)
                }
                _ => {} // forward compatible: unknown keys ignored
            }
        }
        Ok(Self {
            config_hash: config_hash.unwrap_or_default(),
            epoch: epoch.unwrap_or(0),
            seed: seed.unwrap_or(0),
        })
    }
}

fn head_tag(head: Head) -> u32 {
    match head {
        Head::Sigmoid => 0,
        Head::Softmax => 1,
        Head::Identity => 2,
    }
}

fn head_from_tag(tag: u32) -> Result<Head> {
    match tag {
        0 => Ok(Head::Sigmoid),
        1 => Ok(Head::Softmax),
        2 => Ok(Head::Identity),
        other => Err(Error::invalid(format!("unknown head tag {other}"))),
    }
}

pub fn to_bytes(params: &ModelParams, meta: &CheckpointMeta) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let meta_text = meta.to_text();
    out.extend_from_slice(&(meta_text.len() as u32).to_le_bytes());
    out.extend_from_slice(meta_text.as_bytes());
    out.extend_from_slice(&head_tag(params.head()).to_le_bytes());
    out.extend_from_slice(&(params.sizes().len() as u32).to_le_bytes());
    for &s in params.sizes() {
        out.extend_from_slice(&(s as u32).to_le_bytes());
    }
    for l in 0..params.weights().len() {
        let w = &params.weights()[l];
        for r in 0..w.nrows() {
            for c in 0..w.ncols() {
                out.extend_from_slice(&w[(r, c)].to_le_bytes());
            }
        }
        for &b in params.biases()[l].iter() {
            out.extend_from_slice(&b.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + len > self.bytes.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let slice = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(slice)
    }

    fn u32_le(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64_le(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ModelParams, CheckpointMeta)> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = cur.u32_le("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let meta_len = cur.u32_le("metadata length")? as usize;
    let meta_bytes = cur.take(meta_len, "metadata")?;
    let meta = CheckpointMeta::from_text(
        std::str::from_utf8(meta_bytes)
            .map_err(|_| Error::format((cur.pos - meta_len) as u64, "metadata not UTF-8"))?,
    )?;
    let head = head_from_tag(cur.u32_le("head tag")?)?;
    let n_sizes = cur.u32_le("size count")? as usize;
    if n_sizes < 2 {
        return Err(Error::format(cur.pos as u64, "layer chain too short"));
    }
    let mut sizes = Vec::with_capacity(n_sizes);
    for _ in 0..n_sizes {
        sizes.push(cur.u32_le("layer size")? as usize);
    }
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for l in 0..n_sizes - 1 {
        let (rows, cols) = (sizes[l + 1], sizes[l]);
        let mut w = DMatrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                w[(r, c)] = cur.f64_le("weight")?;
            }
        }
        let mut b = DVector::zeros(rows);
        for r in 0..rows {
            b[r] = cur.f64_le("bias")?;
        }
        weights.push(w);
        biases.push(b);
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(
            cur.pos as u64,
            format!("{} trailing bytes after payload", bytes.len() - cur.pos),
        ));
    }
    Ok((ModelParams::from_parts(sizes, weights, biases, head)?, meta))
}

pub fn save_checkpoint(params: &ModelParams, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(params, meta))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, CheckpointMeta)> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            config_hash: "deadbeef".into(),
            epoch: 42,
            seed: 7,
        }
    }

    #[test]
    fn round_trip_bitwise() {
        let params = ModelParams::init(6, &[5, 4], 3, Head::Softmax, 123).unwrap();
        let bytes = to_bytes(&params, &meta());
        let (loaded, m) = from_bytes(&bytes).unwrap();
        assert_eq!(m, meta());
        assert_eq!(loaded, params);
        assert_eq!(to_bytes(&loaded, &m), bytes);
    }

    #[test]
    fn corrupted_magic_rejected() {
        let params = ModelParams::init(3, &[2], 2, Head::Sigmoid, 1).unwrap();
        let mut bytes = to_bytes(&params, &meta());
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn version_bump_is_explicit_error() {
        let params = ModelParams::init(3, &[2], 2, Head::Sigmoid, 1).unwrap();
        let mut bytes = to_bytes(&params, &meta());
        bytes[4] = 9;
        assert!(matches!(
            from_bytes(&bytes),
            Err(Error::UnsupportedVersion { found: 9, expected: 1 })
        ));
    }

    #[test]
    fn truncation_detected() {
        let params = ModelParams::init(3, &[2], 2, Head::Sigmoid, 1).unwrap();
        let bytes = to_bytes(&params, &meta());
        assert!(matches!(
            from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format { .. })
        ));
    }
}
