//! Binary PPM (P6, maxval 255) reading and writing.

use thiserror::Error;

use crate::encoding::RgbImage;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed PPM at byte {offset}: {reason}")]
pub struct PpmError {
    pub offset: usize,
    pub reason: String,
}

fn err(offset: usize, reason: impl Into<String>) -> PpmError {
    PpmError {
        offset,
        reason: reason.into(),
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, PpmError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(start, format!("{what} out of range")))
    }
}

pub fn parse(bytes: &[u8]) -> Result<RgbImage, PpmError> {
    if !bytes.starts_with(b"P6") {
        return Err(err(0, "missing P6 magic"));
    }
    let mut hdr = Header { bytes, pos: 2 };
    let width = hdr.number("width")?;
    let height = hdr.number("height")?;
    hdr.skip_space_and_comments();
    let maxval_at = hdr.pos;
    let maxval = hdr.number("maxval")?;
    if maxval != 255 {
        return Err(err(
            maxval_at,
            format!("maxval {maxval}, only 255 supported"),
        ));
    }
    match bytes.get(hdr.pos) {
        Some(b) if b.is_ascii_whitespace() => hdr.pos += 1,
        _ => return Err(err(hdr.pos, "expected whitespace before raster")),
    }
    if width == 0 || height == 0 {
        return Err(err(hdr.pos, format!("empty image {width}x{height}")));
    }
    let raster = &bytes[hdr.pos..];
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| err(hdr.pos, "dimensions overflow"))?;
    if raster.len() < need {
        return Err(err(
            bytes.len(),
            format!("raster truncated: {} of {need} bytes", raster.len()),
        ));
    }
    if raster.len() > need {
        return Err(err(hdr.pos + need, "trailing bytes after raster"));
    }
    RgbImage::new(width, height, raster.to_vec()).map_err(|e| err(hdr.pos, e.to_string()))
}

pub fn write(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    out
}
