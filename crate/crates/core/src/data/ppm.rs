//! Binary PPM (P6, maxval 255).

use crate::error::{Error, Result};
use crate::vision::RawImage;

fn bad(msg: impl Into<String>) -> Error {
    Error::Format(format!("ppm: {}", msg.into()))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.buf.len() {
            match self.buf[self.pos] {
                b'#' => {
                    while self.pos < self.buf.len() && self.buf[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.buf.len() && self.buf[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        let digits = &self.buf[start..self.pos];
        if digits.is_empty() || digits.len() > 9 {
            return Err(bad(format!("missing or oversized {what}")));
        }
        Ok(std::str::from_utf8(digits).expect("ascii digits").parse().expect("at most 9 digits"))
    }
}

pub fn parse(bytes: &[u8]) -> Result<RawImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(bad("not a binary P6 file"));
    }
    let mut c = Cursor { buf: bytes, pos: 2 };
    let width = c.number("width")?;
    let height = c.number("height")?;
    let maxval = c.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(bad("zero-sized image"));
    }
    if maxval != 255 {
        return Err(bad(format!("only 8-bit maxval 255 is supported, got {maxval}")));
    }
    if c.pos >= bytes.len() || !bytes[c.pos].is_ascii_whitespace() {
        return Err(bad("missing separator before pixel data"));
    }
    let start = c.pos + 1;
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| bad("dimensions overflow"))?;
    let data = &bytes[start..];
    if data.len() < need {
        return Err(bad(format!("truncated pixel data: need {need} bytes, have {}", data.len())));
    }
    RawImage::new(height, width, data[..need].to_vec())
}

pub fn write(img: &RawImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.pixels());
    out
}

pub fn read_file(path: &std::path::Path) -> Result<RawImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut img = RawImage::filled(3, 2, [1, 2, 3]).unwrap();
        img.set_pixel(2, 1, [200, 100, 50]);
        assert_eq!(parse(&write(&img)).unwrap(), img);
    }

    #[test]
    fn comments_and_whitespace() {
        let mut b = b"P6 # made by hand\n1\t1\n# max\n255\n".to_vec();
        b.extend_from_slice(&[9, 8, 7]);
        assert_eq!(parse(&b).unwrap().pixel(0, 0), [9, 8, 7]);
    }

    #[test]
    fn rejects_malformed() {
        assert!(parse(b"P3\n1 1\n255\n000").is_err());
        assert!(parse(b"P6\n1 1\n65535\n000000").is_err());
        assert!(parse(b"P6\n2 2\n255\n000").is_err());
        assert!(parse(b"P6\n0 2\n255\n").is_err());
        assert!(parse(b"P6\n99999999999 2\n255\n").is_err());
        assert!(parse(b"P6\n1 1\n255").is_err());
        assert!(parse(b"").is_err());
    }
}
