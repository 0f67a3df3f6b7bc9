//! Binary greyscale PGM (`P5`, maxval 255).

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len()
                    && self.bytes[self.pos] != b'\n'
                    && self.bytes[self.pos] != b'\r'
                {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format(format!("missing {what} in PGM header")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::Format(format!("{what} out of range")))
    }
}

/// Decodes a `P5` image into a `[1, height, width]` tensor scaled to `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::Format("not a binary PGM (expected P5 magic)".into()));
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!(
            "only maxval 255 is supported, got {maxval}"
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format("PGM extents must be positive".into()));
    }
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(Error::Format("missing whitespace after maxval".into())),
    }
    let payload = &bytes[h.pos..];
    let need = width * height;
    if payload.len() < need {
        return Err(Error::Format(format!(
            "truncated PGM payload: {} of {need} bytes",
            payload.len()
        )));
    }
    let data = payload[..need].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor::from_parts(vec![1, height, width], data))
}

/// Encodes `[n, m]` or `[1, n, m]` values in `[0, 1]` as `P5`, rounding
/// `v * 255`.
pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let (n, m) = match *image.shape() {
        [n, m] | [1, n, m] => (n, m),
        _ => {
            return Err(Error::Shape(format!(
                "PGM needs a single-channel image, got {:?}",
                image.shape()
            )))
        }
    };
    if let Some(v) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Validation(format!("PGM value {v} outside [0, 1]")));
    }
    let mut out = format!("P5\n{m} {n}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|v| (v * 255.0).round() as u8));
    Ok(out)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes)
}

pub fn write_pgm(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_pgm(image)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
