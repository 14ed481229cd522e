//! Binary PGM (P5, maxval 255).

use std::path::Path;

use super::ImageGray;
use crate::error::{Error, Result};
use crate::fsio;

pub fn encode_pgm(img: &ImageGray) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.pixels());
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<ImageGray> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.token()?;
    match magic.as_str() {
        "P5" => {}
        "P1" | "P2" | "P3" | "P4" | "P6" => return Err(Error::UnsupportedFormat(magic)),
        _ => {
            return Err(Error::Parse {
                offset: 0,
                detail: format!("bad magic {magic:?}"),
            })
        }
    }
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!(
            "maxval {maxval} at byte {maxval_at} (only 255 is supported)"
        )));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => {
            return Err(Error::Parse {
                offset: cur.pos,
                detail: "expected whitespace before raster".into(),
            })
        }
    }
    let need = width
        .checked_mul(height)
        .ok_or_else(|| Error::Parse {
            offset: cur.pos,
            detail: "image size overflows".into(),
        })?;
    let raster = &bytes[cur.pos..];
    if raster.len() < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            detail: format!("truncated raster: {} of {need} bytes", raster.len()),
        });
    }
    ImageGray::new(width, height, raster[..need].to_vec()).map_err(|e| Error::Parse {
        offset: cur.pos,
        detail: e.to_string(),
    })
}

pub fn read_pgm(path: &Path) -> Result<ImageGray> {
    decode_pgm(&fsio::read_bytes(path)?)
}

pub fn write_pgm(img: &ImageGray, path: &Path) -> Result<()> {
    fsio::write_atomic(path, &encode_pgm(img))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
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

    fn token(&mut self) -> Result<String> {
        self.skip_space_and_comments();
        let start = self.pos;
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() || b == b'#' {
                break;
            }
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Parse {
                offset: start,
                detail: "unexpected end of header".into(),
            });
        }
        Ok(String::from_utf8_lossy(&self.bytes[start..self.pos]).into_owned())
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let at = self.pos;
        let tok = self.token()?;
        tok.parse::<usize>().map_err(|_| Error::Parse {
            offset: at,
            detail: format!("bad {what} {tok:?}"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_layout() {
        let img = ImageGray::new(2, 2, vec![0, 85, 170, 255]).unwrap();
        let bytes = encode_pgm(&img);
        assert_eq!(&bytes[..11], b"P5\n2 2\n255\n");
        assert_eq!(&bytes[11..], &[0, 85, 170, 255]);
        assert_eq!(decode_pgm(&bytes).unwrap(), img);
    }

    #[test]
    fn truncated_raster_is_a_parse_error() {
        let mut bytes = encode_pgm(&ImageGray::new(2, 2, vec![1, 2, 3, 4]).unwrap());
        bytes.pop();
        assert!(matches!(decode_pgm(&bytes), Err(Error::Parse { .. })));
        assert!(matches!(decode_pgm(b"P5\n2"), Err(Error::Parse { .. })));
    }

    #[test]
    fn ascii_variant_is_named() {
        let err = decode_pgm(b"P2\n1 1\n255\n7\n").unwrap_err();
        assert!(matches!(&err, Error::UnsupportedFormat(f) if f == "P2"), "{err}");
    }

    #[test]
    fn other_maxval_is_rejected() {
        let err = decode_pgm(b"P5\n1 1\n65535\n\x00\x01").unwrap_err();
        assert!(matches!(err, Error::UnsupportedFormat(_)));
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = decode_pgm(b"P5\n# made by hand\n1 2 # dims\n255\n\x05\x06").unwrap();
        assert_eq!(img.pixels(), &[5, 6]);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        let img = ImageGray::new(3, 1, vec![9, 8, 7]).unwrap();
        write_pgm(&img, &p).unwrap();
        assert_eq!(read_pgm(&p).unwrap(), img);
    }
}
