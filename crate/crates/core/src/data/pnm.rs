//! Binary 8-bit PPM (P6) and PGM (P5).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Decoded raster: `channels` interleaved bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub bytes: Vec<u8>,
}

fn parse(bytes: &[u8], magic: &[u8; 2], channels: usize, path: &Path) -> Result<Raster> {
    let err = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(err(format!(
            "expected magic {}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&bytes[..bytes.len().min(2)])
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            let name = ["width", "height", "maxval"][i];
            return Err(err(format!("missing {name} in header")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|e| err(format!("bad header number: {e}")))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(err(format!("only 8-bit files (maxval 255) are supported, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(err(format!("empty raster {width}x{height}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(err("header must end with a single whitespace byte".into()));
    }
    pos += 1;
    let need = width * height * channels;
    let payload = &bytes[pos..];
    if payload.len() != need {
        return Err(err(format!(
            "payload has {} bytes, {width}x{height}x{channels} needs {need}",
            payload.len()
        )));
    }
    Ok(Raster {
        width,
        height,
        channels,
        bytes: payload.to_vec(),
    })
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes, b"P6", 3, path)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes, b"P5", 1, path)
}

pub fn encode(r: &Raster) -> Vec<u8> {
    let magic = if r.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend_from_slice(&r.bytes);
    out
}

pub fn write_raster(path: impl AsRef<Path>, r: &Raster) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(r)).map_err(|e| Error::io(path, e))
}
