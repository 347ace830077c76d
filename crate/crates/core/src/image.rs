//! Float RGB rasters and their PPM / PFM encodings.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{invalid, malformed, GemError, Result};

/// Row-major `height x width x 3` float image.
///
/// Rendered images typically hold values in `[0, 1]`; the same type carries
/// per-pixel loss gradients, which may be negative.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    data: Vec<f64>,
    /// Background the image was composited over.
    pub background: Vector3<f64>,
}

impl ImageBuffer {
    pub fn filled(width: usize, height: usize, rgb: Vector3<f64>) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(rgb.as_slice());
        }
        Self {
            width,
            height,
            data,
            background: rgb,
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, Vector3::zeros())
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(GemError::SizeMismatch {
                expected: format!("{} values for {width}x{height}", width * height * 3),
                found: data.len().to_string(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(invalid("image contains non-finite values"));
        }
        Ok(Self {
            width,
            height,
            data,
            background: Vector3::zeros(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> Vector3<f64> {
        let i = (y * self.width + x) * 3;
        Vector3::new(self.data[i], self.data[i + 1], self.data[i + 2])
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: Vector3<f64>) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(rgb.as_slice());
    }

    pub fn same_size(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub(crate) fn check_same_size(&self, other: &Self) -> Result<()> {
        if self.same_size(other) {
            Ok(())
        } else {
            Err(GemError::SizeMismatch {
                expected: format!("{}x{}", self.width, self.height),
                found: format!("{}x{}", other.width, other.height),
            })
        }
    }

    /// 8-bit RGB bytes, linear values clamped to `[0, 1]`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Images placed side by side; all must share a height.
    pub fn hstack(images: &[ImageBuffer]) -> Result<Self> {
        let Some(first) = images.first() else {
            return Ok(Self::zeros(0, 0));
        };
        let height = first.height;
        if images.iter().any(|im| im.height != height) {
            return Err(invalid("hstack needs equal heights"));
        }
        let width: usize = images.iter().map(|im| im.width).sum();
        let mut out = Self::zeros(width, height);
        out.background = first.background;
        let mut x0 = 0;
        for im in images {
            for y in 0..height {
                let src = &im.data[y * im.width * 3..(y + 1) * im.width * 3];
                let dst = (y * width + x0) * 3;
                out.data[dst..dst + src.len()].copy_from_slice(src);
            }
            x0 += im.width;
        }
        Ok(out)
    }

    /// Binary PPM (P6, 8-bit).
    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_rgb8());
        out
    }

    /// Little-endian PFM (scale -1.0, bottom-to-top scanlines).
    pub fn encode_pfm(&self) -> Vec<u8> {
        let mut out = format!("PF\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        for y in (0..self.height).rev() {
            for v in &self.data[y * self.width * 3..(y + 1) * self.width * 3] {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode_pfm(bytes: &[u8]) -> Result<Self> {
        let mut reader = BufReader::new(bytes);
        let magic = read_token(&mut reader)?;
        if magic != "PF" {
            return Err(malformed("PFM", format!("expected color PFM 'PF', found {magic:?}")));
        }
        let width = parse_usize(&read_token(&mut reader)?)?;
        let height = parse_usize(&read_token(&mut reader)?)?;
        let scale: f64 = read_token(&mut reader)?
            .parse()
            .map_err(|e| malformed("PFM", format!("scale: {e}")))?;
        let mut raw = Vec::new();
        reader.read_to_end(&mut raw)?;
        let needed = width * height * 12;
        if raw.len() < needed {
            return Err(malformed("PFM", format!("need {needed} pixel bytes, found {}", raw.len())));
        }
        let little = scale < 0.0;
        let mut data = vec![0.0; width * height * 3];
        for (i, chunk) in raw[..needed].chunks_exact(4).enumerate() {
            let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
            let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
            let (row_from_bottom, rest) = (i / (width * 3), i % (width * 3));
            let y = height - 1 - row_from_bottom;
            data[y * width * 3 + rest] = v as f64;
        }
        Self::from_data(width, height, data)
    }

    pub fn decode_ppm(bytes: &[u8]) -> Result<Self> {
        let mut reader = BufReader::new(bytes);
        let magic = read_token(&mut reader)?;
        if magic != "P6" {
            return Err(malformed("PPM", format!("expected P6, found {magic:?}")));
        }
        let width = parse_usize(&read_token(&mut reader)?)?;
        let height = parse_usize(&read_token(&mut reader)?)?;
        let maxval = parse_usize(&read_token(&mut reader)?)?;
        if maxval != 255 {
            return Err(malformed("PPM", format!("only 8-bit PPM supported, maxval {maxval}")));
        }
        let mut raw = Vec::new();
        reader.read_to_end(&mut raw)?;
        if raw.len() < width * height * 3 {
            return Err(malformed("PPM", "truncated pixel data"));
        }
        let data = raw[..width * height * 3].iter().map(|&b| b as f64 / 255.0).collect();
        Self::from_data(width, height, data)
    }

    /// Writes PPM or PFM depending on the extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = match extension(path).as_deref() {
            Some("ppm") => self.encode_ppm(),
            Some("pfm") => self.encode_pfm(),
            other => return Err(invalid(format!("unsupported image extension {other:?}"))),
        };
        std::fs::File::create(path)?.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        match extension(path).as_deref() {
            Some("ppm") => Self::decode_ppm(&bytes),
            Some("pfm") => Self::decode_pfm(&bytes),
            other => Err(invalid(format!("unsupported image extension {other:?}"))),
        }
    }
}

fn extension(path: &Path) -> Option<String> {
    path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase())
}

fn parse_usize(s: &str) -> Result<usize> {
    s.parse().map_err(|e| malformed("image header", format!("{s:?}: {e}")))
}

/// Reads one whitespace-delimited header token, consuming exactly one
/// trailing whitespace byte.
fn read_token<R: BufRead>(reader: &mut R) -> Result<String> {
    let mut token = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if reader.read(&mut byte)? == 0 {
            break;
        }
        let b = byte[0];
        if b == b'#' && token.is_empty() {
            let mut comment = Vec::new();
            reader.read_until(b'\n', &mut comment)?;
            continue;
        }
        if b.is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            break;
        }
        token.push(b);
    }
    if token.is_empty() {
        return Err(malformed("image header", "unexpected end of header"));
    }
    String::from_utf8(token).map_err(|e| malformed("image header", e.to_string()))
}
