//! Netpbm (binary PPM/PGM) and raw float map I/O.

use std::fs;
use std::path::Path;

use crate::error::{bail, Error, Result};
use crate::tensor::Tensor;

/// 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            pixels: vec![0; width * height * 3],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Nearest-neighbour upscale by an integer factor.
    pub fn upscale(&self, factor: usize) -> RgbImage {
        let mut out = RgbImage::new(self.width * factor, self.height * factor);
        for r in 0..out.height {
            for c in 0..out.width {
                out.set(r, c, self.get(r / factor, c / factor));
            }
        }
        out
    }

    /// `[3,H,W]` tensor in `[0,1]` quantised to 8 bits.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 {
            bail!(Dimension, "expected a [3,H,W] image, got {s:?}");
        }
        let (h, w) = (s[1], s[2]);
        let mut img = RgbImage::new(w, h);
        let d = t.data();
        for p in 0..h * w {
            for c in 0..3 {
                img.pixels[p * 3 + c] = quantize(d[c * h * w + p]);
            }
        }
        Ok(img)
    }

    pub fn to_tensor(&self) -> Tensor {
        let (h, w) = (self.height, self.width);
        Tensor::from_fn(&[3, h, w], |i| {
            let (c, p) = (i / (h * w), i % (h * w));
            self.pixels[p * 3 + c] as f32 / 255.0
        })
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (magic, w, h, maxval, body) = parse_header(&bytes).map_err(|m| Error::Usage(format!("{}: {m}", path.display())))?;
        if magic != "P6" || maxval != 255 || body.len() != w * h * 3 {
            bail!(Usage, "{}: not an 8-bit binary PPM", path.display());
        }
        Ok(RgbImage {
            width: w,
            height: h,
            pixels: body.to_vec(),
        })
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn parse_header(bytes: &[u8]) -> std::result::Result<(String, usize, usize, usize, &[u8]), String> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if i >= bytes.len() {
        return Err("missing raster".into());
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field {s:?}"));
    Ok((fields[0].clone(), num(&fields[1])?, num(&fields[2])?, num(&fields[3])?, &bytes[i + 1..]))
}

/// Writes a 16-bit binary PGM (big-endian samples, as Netpbm specifies).
pub fn write_pgm16(path: &Path, width: usize, height: usize, data: &[u16]) -> Result<()> {
    if data.len() != width * height {
        bail!(Dimension, "{} samples for a {width}x{height} map", data.len());
    }
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for v in data {
        out.extend_from_slice(&v.to_be_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Returns `(width, height, samples)`.
pub fn read_pgm16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (magic, w, h, maxval, body) = parse_header(&bytes).map_err(|m| Error::Usage(format!("{}: {m}", path.display())))?;
    if magic != "P5" || maxval != 65535 || body.len() != w * h * 2 {
        bail!(Usage, "{}: not a 16-bit binary PGM", path.display());
    }
    let data = body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Ok((w, h, data))
}

pub fn write_f32(path: &Path, data: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f32(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        bail!(Usage, "{}: length is not a multiple of 4", path.display());
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}
