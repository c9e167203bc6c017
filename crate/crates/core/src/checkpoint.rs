//! Checkpoint container: one archive holding a plain-text config header
//! and named parameter tensors in a flat binary layout.
//!
//! ```text
//! magic    8 bytes  "MSGRCKPT"
//! version  u32 LE
//! hdr_len  u64 LE
//! header   hdr_len bytes, UTF-8 "key=value" lines
//! count    u32 LE
//! tensor*  name_len u32 LE | name | dtype u8 | ndim u8 |
//!          dims (u64 LE each) | row-major data, little-endian
//! ```
//!
//! Round trips are bit-exact; readers reject wrong magic or version,
//! truncation, and dtype mismatches against the requested scalar type.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, StageConfig};
use crate::scalar::{Dtype, Scalar};

const MAGIC: &[u8; 8] = b"MSGRCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct NamedTensor<S: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

pub type Header = BTreeMap<String, String>;

pub fn write_container<S: Scalar>(
    path: &Path,
    header: &Header,
    tensors: &[NamedTensor<S>],
) -> Result<()> {
    let mut header_text = String::new();
    for (k, v) in header {
        assert!(!k.contains('\n') && !v.contains('\n'), "header values are single-line");
        header_text.push_str(k);
        header_text.push('=');
        header_text.push_str(v);
        header_text.push('\n');
    }
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_text.len() as u64).to_le_bytes());
    bytes.extend_from_slice(header_text.as_bytes());
    bytes.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        let len: usize = t.shape.iter().product();
        assert_eq!(len, t.data.len(), "tensor '{}' shape/data mismatch", t.name);
        bytes.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(t.name.as_bytes());
        bytes.push(S::DTYPE.tag());
        bytes.push(t.shape.len() as u8);
        for &d in &t.shape {
            bytes.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.data {
            v.write_le(&mut bytes);
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file: needed {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

fn read_header_from(r: &mut Reader, path: &Path) -> Result<Header> {
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let hdr_len = r.u64()? as usize;
    let header_text = std::str::from_utf8(r.take(hdr_len)?)
        .map_err(|_| Error::Checkpoint("header is not UTF-8".to_string()))?;
    let mut header = Header::new();
    for line in header_text.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("malformed header line '{line}'")))?;
        header.insert(k.to_string(), v.to_string());
    }
    Ok(header)
}

/// Reads only the plain-text header, e.g. to learn the stored dtype
/// before choosing how to load the tensors.
pub fn read_container_header(path: &Path) -> Result<(Header, ())> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    Ok((read_header_from(&mut r, path)?, ()))
}

pub fn read_container<S: Scalar>(path: &Path) -> Result<(Header, Vec<NamedTensor<S>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    let header = read_header_from(&mut r, path)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".to_string()))?;
        let dtype = Dtype::from_tag(r.u8()?)
            .ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag for '{name}'")))?;
        if dtype != S::DTYPE {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' is {} but this session uses {}",
                dtype.name(),
                S::DTYPE.name()
            )));
        }
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = r.take(len * dtype.size())?;
        let data: Vec<S> = raw.chunks_exact(dtype.size()).map(S::read_le).collect();
        tensors.push(NamedTensor { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok((header, tensors))
}

// ---------------------------------------------------------------------------
// ModelConfig <-> header
// ---------------------------------------------------------------------------

/// Stages serialize as `channels:stride:blocks:expansion` joined by commas.
pub fn model_config_to_header(cfg: &ModelConfig, header: &mut Header) {
    let stages = cfg
        .stages
        .iter()
        .map(|s| {
            format!(
                "{}:{}:{}:{}",
                s.channels, s.patch_stride, s.num_blocks, s.ffn_expansion
            )
        })
        .collect::<Vec<_>>()
        .join(",");
    header.insert("model.stages".into(), stages);
    header.insert("model.decoder_dim".into(), cfg.decoder_dim.to_string());
    header.insert("model.classes".into(), cfg.num_classes.to_string());
    header.insert("model.in_channels".into(), cfg.in_channels.to_string());
    header.insert("model.alpha".into(), format!("{:?}", cfg.alpha));
    header.insert("model.heads".into(), cfg.attn_heads.to_string());
}

fn header_get<'a>(header: &'a Header, key: &str) -> Result<&'a str> {
    header
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Checkpoint(format!("header missing '{key}'")))
}

pub fn parse_header_field<T: std::str::FromStr>(header: &Header, key: &str) -> Result<T> {
    header_get(header, key)?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("header field '{key}' is malformed")))
}

pub fn model_config_from_header(header: &Header) -> Result<ModelConfig> {
    let mut stages = Vec::new();
    for part in header_get(header, "model.stages")?.split(',') {
        let nums: Vec<usize> = part
            .split(':')
            .map(|f| f.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Checkpoint(format!("bad stage spec '{part}'")))?;
        if nums.len() != 4 {
            return Err(Error::Checkpoint(format!("bad stage spec '{part}'")));
        }
        stages.push(StageConfig {
            channels: nums[0],
            patch_stride: nums[1],
            num_blocks: nums[2],
            ffn_expansion: nums[3],
        });
    }
    Ok(ModelConfig {
        stages,
        decoder_dim: parse_header_field(header, "model.decoder_dim")?,
        num_classes: parse_header_field(header, "model.classes")?,
        in_channels: parse_header_field(header, "model.in_channels")?,
        alpha: parse_header_field(header, "model.alpha")?,
        attn_heads: parse_header_field(header, "model.heads")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let mut header = Header::new();
        header.insert("seed".into(), "42".into());
        header.insert("iteration".into(), "7".into());
        let tensors = vec![
            NamedTensor {
                name: "a.w".into(),
                shape: vec![2, 3],
                data: vec![1.0f64, -2.5, 3.25e-300, 0.0, f64::MIN_POSITIVE, 9.9],
            },
            NamedTensor {
                name: "b".into(),
                shape: vec![2],
                data: vec![0.1, -0.0],
            },
        ];
        write_container(&path, &header, &tensors).unwrap();
        let (h2, t2) = read_container::<f64>(&path).unwrap();
        assert_eq!(h2, header);
        assert_eq!(t2.len(), 2);
        for (a, b) in tensors.iter().zip(&t2) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn truncated_and_corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let header = Header::new();
        let tensors = vec![NamedTensor {
            name: "x".into(),
            shape: vec![4],
            data: vec![1.0f64; 4],
        }];
        write_container(&path, &header, &tensors).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            read_container::<f64>(&path),
            Err(Error::Checkpoint(_))
        ));
        // Wrong magic.
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(read_container::<f64>(&path).is_err());
        // Wrong version.
        let mut bad = bytes.clone();
        bad[8] = 99;
        fs::write(&path, &bad).unwrap();
        assert!(read_container::<f64>(&path).is_err());
        // Dtype mismatch.
        fs::write(&path, &bytes).unwrap();
        assert!(read_container::<f32>(&path).is_err());
    }

    #[test]
    fn model_config_header_round_trip() {
        let cfg = ModelConfig::tiny(3, 0.5);
        let mut header = Header::new();
        model_config_to_header(&cfg, &mut header);
        let back = model_config_from_header(&header).unwrap();
        assert_eq!(back, cfg);
    }
}
