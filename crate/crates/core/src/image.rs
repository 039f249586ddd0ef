//! Binary PPM (P6) and PGM (P5) files.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit interleaved RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        Self {
            width,
            height,
            data: fill.repeat(width * height),
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let (width, height, data) = parse_netpbm(bytes, b"P6", 3)?;
        Ok(Self { width, height, data })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_ppm())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_ppm(&fs::read(path)?)
    }
}

/// Grayscale PGM (P5, maxval 255).
pub fn to_pgm(width: usize, height: usize, data: &[u8]) -> Result<Vec<u8>> {
    if data.len() != width * height {
        return Err(Error::Contract(format!(
            "pgm payload of {} bytes for {width}x{height}",
            data.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    Ok(out)
}

pub fn from_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    parse_netpbm(bytes, b"P5", 1)
}

fn parse_netpbm(bytes: &[u8], magic: &[u8], channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    if !bytes.starts_with(magic) {
        return Err(Error::Format(format!(
            "expected {} header",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = magic.len();
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and `#` comments between header fields
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
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("malformed netpbm header".into()))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("malformed netpbm header".into()));
    }
    pos += 1;
    let need = width * height * channels;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(Error::Format(format!(
            "truncated netpbm payload: {} of {need} bytes",
            payload.len()
        )));
    }
    Ok((width, height, payload[..need].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_with_comment() {
        let mut img = RgbImage::new(3, 2, [255, 255, 255]);
        img.set(1, 1, [10, 20, 30]);
        let back = RgbImage::from_ppm(&img.to_ppm()).unwrap();
        assert_eq!(back, img);

        let mut commented = b"P6\n# made by hand\n3 2\n255\n".to_vec();
        commented.extend_from_slice(&img.data);
        assert_eq!(RgbImage::from_ppm(&commented).unwrap(), img);
    }

    #[test]
    fn truncated_ppm_is_rejected() {
        let img = RgbImage::new(4, 4, [1, 2, 3]);
        let bytes = img.to_ppm();
        assert!(matches!(
            RgbImage::from_ppm(&bytes[..bytes.len() - 1]),
            Err(Error::Format(_))
        ));
        assert!(RgbImage::from_ppm(b"P5\n1 1\n255\n\0").is_err());
    }

    #[test]
    fn pgm_round_trip() {
        let data = vec![0, 64, 128, 255, 7, 9];
        let bytes = to_pgm(3, 2, &data).unwrap();
        assert_eq!(from_pgm(&bytes).unwrap(), (3, 2, data));
    }
}
