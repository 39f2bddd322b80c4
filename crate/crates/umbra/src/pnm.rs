//! Binary netpbm: P5 (greymap) and P6 (pixmap), maxval up to 65535.

use std::io::{self, Write};

/// Decoded samples, interleaved per pixel, scaled to `0..=maxval`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

struct Header<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.buf.get(self.pos) {
            if b == b'#' {
                while self.buf.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> io::Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.buf.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.buf[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| invalid(format!("bad {what} in header")))
    }
}

pub fn decode(buf: &[u8]) -> io::Result<Pnm> {
    let channels = match buf.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(invalid("not a binary PGM/PPM (expected P5 or P6)")),
    };
    let mut h = Header { buf, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(invalid("empty image"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(invalid(format!("maxval {maxval} out of range")));
    }
    // exactly one whitespace byte before the raster
    if !buf.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(invalid("missing whitespace after maxval"));
    }
    let raster = &buf[h.pos + 1..];
    let n = width * height * channels;
    let wide = maxval > 255;
    let need = if wide { 2 * n } else { n };
    if raster.len() < need {
        return Err(invalid(format!("raster truncated: {} of {need} bytes", raster.len())));
    }
    let samples: Vec<u16> = if wide {
        raster[..need].chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()
    } else {
        raster[..n].iter().map(|&b| b as u16).collect()
    };
    if samples.iter().any(|&s| s as usize > maxval) {
        return Err(invalid("sample exceeds maxval"));
    }
    Ok(Pnm { width, height, channels, maxval: maxval as u16, samples })
}

/// Writes an 8-bit P5 or P6 depending on `channels`.
pub fn encode(mut out: impl Write, width: usize, height: usize, channels: usize, samples: &[u8]) -> io::Result<()> {
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        c => return Err(invalid(format!("{c} channels cannot be stored as PNM"))),
    };
    if samples.len() != width * height * channels {
        return Err(invalid("sample count does not match dimensions"));
    }
    write!(out, "{magic}\n{width} {height}\n255\n")?;
    out.write_all(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_p6() {
        let px: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 13) as u8).collect();
        let mut buf = Vec::new();
        encode(&mut buf, 3, 2, 3, &px).unwrap();
        assert!(buf.starts_with(b"P6\n3 2\n255\n"));
        let img = decode(&buf).unwrap();
        assert_eq!((img.width, img.height, img.channels, img.maxval), (3, 2, 3, 255));
        assert_eq!(img.samples, px.iter().map(|&b| b as u16).collect::<Vec<_>>());
    }

    #[test]
    fn comments_and_sixteen_bit() {
        let mut buf = b"P5 # grey\n# more\n2 1\n# max\n1000\n".to_vec();
        buf.extend_from_slice(&[0x03, 0xE8, 0x00, 0x07]);
        let img = decode(&buf).unwrap();
        assert_eq!(img.samples, vec![1000, 7]);
        assert_eq!(img.maxval, 1000);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(decode(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(decode(b"P5\n2 2\n255\n\x00\x01").is_err());
        assert!(decode(b"P5\n1 1\n10\n\x0b").is_err());
        assert!(decode(b"P5\n0 1\n255\n").is_err());
        assert!(encode(Vec::new(), 1, 1, 2, &[0, 0]).is_err());
    }
}
