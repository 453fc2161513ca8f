//! Binary PPM (P6) and PGM (P5) with 8-bit samples.

use std::path::Path;

use crate::error::{Error, Result};

/// An 8-bit image with 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image8 {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image8 {
    pub fn encode(&self) -> Vec<u8> {
        let magic = match self.channels {
            1 => "P5",
            3 => "P6",
            c => panic!("PNM images have 1 or 3 channels, not {c}"),
        };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                _ => return,
            }
        }
    }

    fn number(&mut self) -> Option<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).ok()?.parse().ok()
    }
}

/// Parses P5 or P6; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Image8> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::format(path, "not a binary PGM/PPM file")),
    };
    let mut h = Header { bytes, pos: 2 };
    let bad = |what: &str| Error::format(path, format!("bad header: {what}"));
    let width = h.number().ok_or_else(|| bad("width"))?;
    let height = h.number().ok_or_else(|| bad("height"))?;
    let maxval = h.number().ok_or_else(|| bad("maxval"))?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(path, format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(path, "empty image"));
    }
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing separator before pixel data"));
    }
    let start = h.pos + 1;
    let need = width * height * channels;
    let payload = &bytes[start..];
    if payload.len() != need {
        return Err(Error::format(
            path,
            format!("expected {need} bytes of pixel data, found {}", payload.len()),
        ));
    }
    Ok(Image8 {
        height,
        width,
        channels,
        data: payload.to_vec(),
    })
}

pub fn read(path: &Path) -> Result<Image8> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_comments() {
        let img = Image8 {
            height: 2,
            width: 3,
            channels: 3,
            data: (0..18).collect(),
        };
        let bytes = img.encode();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(decode(&bytes, Path::new("a.ppm")).unwrap(), img);
        let mut commented = b"P5 # gray\n2 1\n# max\n255\n".to_vec();
        commented.extend([7, 9]);
        let g = decode(&commented, Path::new("b.pgm")).unwrap();
        assert_eq!((g.channels, g.data), (1, vec![7, 9]));
    }

    #[test]
    fn truncated_payload_names_the_file() {
        let img = Image8 {
            height: 2,
            width: 2,
            channels: 1,
            data: vec![1, 2, 3, 4],
        };
        let bytes = img.encode();
        let err = decode(&bytes[..bytes.len() - 1], Path::new("mask_0003.pgm")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(err.to_string().contains("mask_0003.pgm"));
        assert!(decode(b"P3\n1 1\n255\n0 0 0", Path::new("x")).is_err());
    }
}
