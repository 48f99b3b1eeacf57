//! `DST1` tensor files: the magic line, an ASCII `n c h w` line, then
//! little-endian `f32` values.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Shape, Tensor};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8] = b"DST1\n";

pub fn write_tensor_to(mut w: impl Write, t: &Tensor) -> std::io::Result<()> {
    let s = t.shape();
    w.write_all(TENSOR_MAGIC)?;
    writeln!(w, "{} {} {} {}", s.n, s.c, s.h, s.w)?;
    for &v in t.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_tensor_to(BufWriter::new(f), t).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_from(r: impl Read, origin: &Path) -> Result<Tensor> {
    let parse_err = |msg: String| Error::Parse {
        path: origin.to_path_buf(),
        msg,
    };
    let mut r = BufReader::new(r);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|_| parse_err("file too short for magic".into()))?;
    if magic != TENSOR_MAGIC {
        return Err(parse_err(format!("bad magic {magic:?}")));
    }
    let mut header = String::new();
    r.read_line(&mut header)
        .map_err(|e| parse_err(format!("unreadable header: {e}")))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|d| d.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| parse_err(format!("bad header {header:?}: {e}")))?;
    if dims.len() != 4 {
        return Err(parse_err(format!("header needs 4 dimensions, got {header:?}")));
    }
    let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| parse_err(format!("unreadable payload: {e}")))?;
    if bytes.len() != shape.numel() * 4 {
        return Err(parse_err(format!(
            "payload has {} bytes, shape {shape} needs {}",
            bytes.len(),
            shape.numel() * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Tensor::from_vec(shape, data).map_err(|e| parse_err(e.to_string()))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor_from(f, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &t).unwrap();
        let mut expected = b"DST1\n1 1 1 2\n".to_vec();
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn rejects_truncated_payload() {
        let mut buf = b"DST1\n1 1 2 2\n".to_vec();
        buf.extend_from_slice(&[0u8; 12]);
        let err = read_tensor_from(&buf[..], Path::new("x.dst")).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        assert!(read_tensor_from(&b"DST2\n1 1 1 1\n\0\0\0\0"[..], Path::new("x")).is_err());
    }

    proptest! {
        #[test]
        fn f32_values_round_trip(vals in proptest::collection::vec(-1e6f32..1e6, 1..40)) {
            let shape = Shape::new(1, 1, 1, vals.len());
            let t = Tensor::from_vec(shape, vals.iter().map(|&v| v as f64).collect()).unwrap();
            let mut buf = Vec::new();
            write_tensor_to(&mut buf, &t).unwrap();
            let back = read_tensor_from(&buf[..], Path::new("mem")).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
