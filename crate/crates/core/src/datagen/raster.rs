//! Lossless single-channel 16-bit raster I/O (binary PGM, maxval 65535).
//!
//! PGM keeps the corpus parseable from any language and bit-exact: the
//! header is ASCII (`P5`, width, height, maxval) and pixels are big-endian
//! u16, row-major.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// Row-major pixels.
    pub pixels: Vec<u16>,
}

pub fn write_raster(path: &Path, raster: &Raster) -> Result<()> {
    assert_eq!(raster.pixels.len(), raster.width * raster.height);
    let mut bytes = Vec::with_capacity(raster.pixels.len() * 2 + 32);
    bytes.extend_from_slice(format!("P5\n{} {}\n65535\n", raster.width, raster.height).as_bytes());
    for &px in &raster.pixels {
        bytes.extend_from_slice(&px.to_be_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_raster(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_raster(&bytes).map_err(|message| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message,
    })
}

fn parse_raster(bytes: &[u8]) -> std::result::Result<Raster, String> {
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> std::result::Result<String, String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".to_string());
        }
        String::from_utf8(bytes[start..pos].to_vec()).map_err(|_| "non-ASCII header".to_string())
    };
    let magic = token(bytes)?;
    if magic != "P5" {
        return Err(format!("expected P5 magic, found '{magic}'"));
    }
    let width: usize = token(bytes)?.parse().map_err(|_| "bad width".to_string())?;
    let height: usize = token(bytes)?.parse().map_err(|_| "bad height".to_string())?;
    let maxval: usize = token(bytes)?.parse().map_err(|_| "bad maxval".to_string())?;
    if maxval != 65535 {
        return Err(format!("expected maxval 65535, found {maxval}"));
    }
    // Exactly one whitespace byte separates the header from pixel data.
    pos += 1;
    let need = width * height * 2;
    if bytes.len() < pos + need {
        return Err(format!(
            "truncated pixel data: need {need} bytes, found {}",
            bytes.len().saturating_sub(pos)
        ));
    }
    let mut pixels = Vec::with_capacity(width * height);
    for chunk in bytes[pos..pos + need].chunks_exact(2) {
        pixels.push(u16::from_be_bytes([chunk[0], chunk[1]]));
    }
    Ok(Raster {
        width,
        height,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        let raster = Raster {
            width: 3,
            height: 2,
            pixels: vec![0, 1, 65535, 32768, 7, 9],
        };
        write_raster(&path, &raster).unwrap();
        let back = read_raster(&path).unwrap();
        assert_eq!(back.width, 3);
        assert_eq!(back.height, 2);
        assert_eq!(back.pixels, raster.pixels);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        let raster = Raster {
            width: 4,
            height: 4,
            pixels: vec![42; 16],
        };
        write_raster(&path, &raster).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_raster(&path).is_err());
    }
}
