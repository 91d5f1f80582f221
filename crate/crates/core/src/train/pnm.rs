//! Binary PGM (`P5`) and PPM (`P6`) images with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit image stored channel-planar `(C, H, W)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b' ' | b'\t' | b'\n' | b'\r' => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::BadFormat("malformed PNM header number".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Image> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::BadFormat("not a binary PGM/PPM file".into())),
    };
    let mut hdr = Header { bytes, pos: 2 };
    let width = hdr.number()?;
    let height = hdr.number()?;
    let maxval = hdr.number()?;
    if width == 0 || height == 0 {
        return Err(Error::BadFormat("zero image dimension".into()));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::BadFormat(format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(hdr.pos) {
        Some(b) if b.is_ascii_whitespace() => hdr.pos += 1,
        _ => return Err(Error::BadFormat("missing raster separator".into())),
    }
    let count = width * height * channels;
    let raster = bytes
        .get(hdr.pos..hdr.pos + count)
        .ok_or_else(|| Error::BadFormat(format!("raster holds {} of {count} bytes", bytes.len() - hdr.pos)))?;
    let mut pixels = vec![0u8; count];
    let plane = width * height;
    for (idx, &v) in raster.iter().enumerate() {
        let (px, c) = (idx / channels, idx % channels);
        if v as usize > maxval {
            return Err(Error::BadFormat(format!("sample {v} above maxval {maxval}")));
        }
        pixels[c * plane + px] = v;
    }
    Ok(Image {
        channels,
        height,
        width,
        pixels,
    })
}

/// PPM for three channels, PGM otherwise. Images with other channel
/// counts are written as one grayscale strip with the channels side by side.
pub fn encode(img: &Image) -> Vec<u8> {
    let [c, h, w] = img.dims();
    let plane = h * w;
    if c == 3 {
        let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
        for px in 0..plane {
            for ch in 0..3 {
                out.push(img.pixels[ch * plane + px]);
            }
        }
        return out;
    }
    let mut out = format!("P5\n{} {h}\n255\n", w * c).into_bytes();
    for i in 0..h {
        for ch in 0..c {
            out.extend_from_slice(&img.pixels[ch * plane + i * w..ch * plane + (i + 1) * w]);
        }
    }
    out
}

pub fn read(path: impl AsRef<Path>) -> Result<Image> {
    decode(&fs::read(path)?)
}

pub fn write(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    fs::write(path, encode(img))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_16x16() {
        let mut bytes = b"P5\n# comment\n16 16\n255\n".to_vec();
        bytes.extend((0..=255u8).collect::<Vec<_>>());
        let img = decode(&bytes).unwrap();
        assert_eq!(img.dims(), [1, 16, 16]);
        assert_eq!(img.pixels[17], 17);
        assert_eq!(decode(&encode(&img)).unwrap(), img);
    }

    #[test]
    fn ppm_round_trip_is_planar() {
        let img = Image {
            channels: 3,
            height: 1,
            width: 2,
            pixels: vec![1, 2, 3, 4, 5, 6],
        };
        let bytes = encode(&img);
        assert_eq!(&bytes[bytes.len() - 6..], &[1, 3, 5, 2, 4, 6]);
        assert_eq!(decode(&bytes).unwrap(), img);
    }

    #[test]
    fn corrupt_header() {
        assert!(matches!(decode(b"P3\n1 1\n255\n\0"), Err(Error::BadFormat(_))));
        assert!(matches!(decode(b"P5\nx 1\n255\n\0"), Err(Error::BadFormat(_))));
        assert!(matches!(decode(b"P5\n2 2\n255\n\0"), Err(Error::BadFormat(_))));
        assert!(matches!(decode(b"P5\n1 1\n999\n\0"), Err(Error::BadFormat(_))));
    }

    #[test]
    fn four_channels_written_side_by_side() {
        let img = Image {
            channels: 4,
            height: 1,
            width: 1,
            pixels: vec![9, 8, 7, 6],
        };
        let back = decode(&encode(&img)).unwrap();
        assert_eq!(back.dims(), [1, 1, 4]);
        assert_eq!(back.pixels, vec![9, 8, 7, 6]);
    }
}
