//! Raster images and the two on-disk formats the pipeline reads:
//! binary PGM/PPM (P5/P6, maxval 255) and the raw tensor `.rt` format.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

const RT_MAGIC: &[u8; 4] = b"RT01";

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRaster {
    height: usize,
    width: usize,
    channels: usize,
    /// Row-major, channel-interleaved, values in [0, 1].
    pixels: Vec<f32>,
}

impl ImageRaster {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Validation(format!(
                "unsupported channel count {channels}"
            )));
        }
        if height == 0 || width == 0 || pixels.len() != height * width * channels {
            return Err(Error::Validation(format!(
                "pixel buffer of {} does not match {height}x{width}x{channels}",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels
            .iter()
            .find(|p| !p.is_finite() || **p < 0.0 || **p > 1.0)
        {
            return Err(Error::Validation(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            pixels: vec![0.0; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, ch: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + ch]
    }

    /// Panics if the value is outside [0, 1].
    pub fn set(&mut self, y: usize, x: usize, ch: usize, value: f32) {
        assert!(
            (0.0..=1.0).contains(&value),
            "pixel value {value} outside [0, 1]"
        );
        self.pixels[(y * self.width + x) * self.channels + ch] = value;
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    /// Load by extension: `.rt` raw tensor, otherwise PGM/PPM.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let label = path.display().to_string();
        if path.extension().is_some_and(|e| e == "rt") {
            decode_rt(&bytes, &label)
        } else {
            decode_pnm(&bytes, &label)
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = if path.extension().is_some_and(|e| e == "rt") {
            self.encode_rt()
        } else {
            self.encode_pnm()
        };
        let mut f = std::fs::File::create(path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        f.write_all(&bytes)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn encode_pnm(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|&p| (p * 255.0).round() as u8));
        out
    }

    pub fn encode_rt(&self) -> Vec<u8> {
        let dims: Vec<u32> = if self.channels == 1 {
            vec![self.height as u32, self.width as u32]
        } else {
            vec![self.height as u32, self.width as u32, self.channels as u32]
        };
        let mut out = RT_MAGIC.to_vec();
        out.push(dims.len() as u8);
        for d in dims {
            out.extend(d.to_le_bytes());
        }
        for p in &self.pixels {
            out.extend(p.to_le_bytes());
        }
        out
    }
}

pub fn decode_rt(bytes: &[u8], label: &str) -> Result<ImageRaster> {
    let err = |m: &str| Error::format(label, None, m.to_string());
    if bytes.len() < 5 || &bytes[..4] != RT_MAGIC {
        return Err(err("missing RT01 magic"));
    }
    let ndim = bytes[4] as usize;
    let mut pos = 5;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let raw = bytes
            .get(pos..pos + 4)
            .ok_or_else(|| err("truncated header"))?;
        dims.push(u32::from_le_bytes(raw.try_into().unwrap()) as usize);
        pos += 4;
    }
    let (h, w, ch) = match dims.as_slice() {
        [h, w] => (*h, *w, 1),
        [h, w, c] => (*h, *w, *c),
        _ => return Err(err("image tensors must have 2 or 3 dims")),
    };
    let n = h * w * ch;
    let body = &bytes[pos..];
    if body.len() != n * 4 {
        return Err(err(&format!(
            "expected {} data bytes, found {}",
            n * 4,
            body.len()
        )));
    }
    let pixels = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ImageRaster::new(h, w, ch, pixels).map_err(|e| err(&e.to_string()))
}

pub fn decode_pnm(bytes: &[u8], label: &str) -> Result<ImageRaster> {
    let err = |m: &str| Error::format(label, None, m.to_string());
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| err("bad header"))?);
    }
    // exactly one whitespace byte separates maxval from the raster
    pos += 1;
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        other => return Err(err(&format!("unsupported magic {other}"))),
    };
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| err(&format!("bad header field {s}")))
    };
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 255 {
        return Err(err(&format!("maxval must be 255, got {maxval}")));
    }
    let n = w * h * channels;
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != n {
        return Err(err(&format!(
            "expected {n} raster bytes, found {}",
            body.len()
        )));
    }
    let pixels = body.iter().map(|&b| b as f32 / 255.0).collect();
    ImageRaster::new(h, w, channels, pixels).map_err(|e| err(&e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ImageRaster {
        let px: Vec<f32> = (0..4 * 6 * 3).map(|i| (i % 256) as f32 / 255.0).collect();
        ImageRaster::new(4, 6, 3, px).unwrap()
    }

    #[test]
    fn pnm_roundtrip_at_255_levels() {
        let img = sample();
        let back = decode_pnm(&img.encode_pnm(), "mem").unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn rt_roundtrip_is_exact() {
        let mut img = ImageRaster::zeros(2, 3, 1);
        img.set(1, 2, 0, 0.123_456_7);
        assert_eq!(decode_rt(&img.encode_rt(), "mem").unwrap(), img);
    }

    #[test]
    fn pnm_header_comments_are_skipped() {
        let mut bytes = b"P5\n# comment\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        let img = decode_pnm(&bytes, "mem").unwrap();
        assert_eq!(img.pixels(), &[0.0, 1.0]);
    }

    #[test]
    fn bad_inputs_are_format_errors() {
        assert!(matches!(decode_rt(b"RT02", "x"), Err(Error::Format { .. })));
        assert!(matches!(
            decode_pnm(b"P5\n2 2\n65535\n", "x"),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            decode_pnm(b"P5\n2 2\n255\n\x00", "x"),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn pixel_range_is_validated() {
        assert!(ImageRaster::new(1, 1, 1, vec![1.5]).is_err());
        assert!(ImageRaster::new(1, 1, 1, vec![f32::NAN]).is_err());
        assert!(ImageRaster::new(1, 1, 2, vec![0.0, 0.0]).is_err());
    }
}
