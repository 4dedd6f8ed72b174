//! Depth maps as PFM, images as binary PPM.
//!
//! Depth uses single-channel PFM with a negative scale (little-endian) and
//! NaN for invalid pixels. Rows are stored bottom to top as the format
//! requires; in memory everything is row-major from the top.

use std::fs;
use std::path::Path;

use itermvs_tensor::Tensor;

use crate::error::{MvsError, Result};

/// A row-major `h x w` depth map.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(MvsError::Config(format!("{} values for a {height}x{width} map", data.len())));
        }
        Ok(DepthMap { height, width, data })
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Bitwise comparison, so NaN entries compare equal to themselves.
    pub fn bitwise_eq(&self, other: &DepthMap) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Splits the ASCII header of a binary netpbm-style file into `count`
/// tokens. Returns each token with its byte offset, plus the offset of
/// the payload (one whitespace byte after the last token).
fn header(bytes: &[u8], count: usize, path: &Path) -> Result<(Vec<(String, usize)>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        if i >= bytes.len() {
            return Err(MvsError::parse(path, i, "truncated header"));
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let tok = std::str::from_utf8(&bytes[start..i]).map_err(|_| MvsError::parse(path, start, "non-ASCII header"))?;
        tokens.push((tok.to_string(), start));
    }
    if i >= bytes.len() {
        return Err(MvsError::parse(path, i, "missing payload"));
    }
    Ok((tokens, i + 1))
}

fn dims(tokens: &[(String, usize)], path: &Path) -> Result<(usize, usize)> {
    let num = |(t, off): &(String, usize)| match t.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(MvsError::parse(path, *off, format!("bad dimension '{t}'"))),
    };
    Ok((num(&tokens[0])?, num(&tokens[1])?))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| MvsError::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| MvsError::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| MvsError::io(path, e))
}

pub fn encode_pfm(depth: &DepthMap) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", depth.width, depth.height).into_bytes();
    out.reserve(depth.data.len() * 4);
    for y in (0..depth.height).rev() {
        for &v in &depth.data[y * depth.width..(y + 1) * depth.width] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<DepthMap> {
    let (tok, start) = header(bytes, 4, path)?;
    if tok[0].0 != "Pf" {
        return Err(MvsError::parse(path, 0, format!("expected single-channel 'Pf', found '{}'", tok[0].0)));
    }
    let (w, h) = dims(&tok[1..3], path)?;
    let scale: f64 = tok[3]
        .0
        .parse()
        .map_err(|_| MvsError::parse(path, tok[3].1, "bad scale"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(MvsError::parse(path, tok[3].1, "scale must be nonzero"));
    }
    let need = w * h * 4;
    if bytes.len() - start < need {
        return Err(MvsError::parse(path, bytes.len(), format!("payload needs {need} bytes")));
    }
    let mut data = vec![0f32; w * h];
    for (i, chunk) in bytes[start..start + need].chunks_exact(4).enumerate() {
        let b: [u8; 4] = chunk.try_into().expect("four bytes");
        let v = if scale < 0.0 { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, col) = (i / w, i % w);
        data[(h - 1 - row) * w + col] = v;
    }
    Ok(DepthMap { height: h, width: w, data })
}

pub fn save_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    write(path, &encode_pfm(depth))
}

pub fn load_depth(path: &Path) -> Result<DepthMap> {
    decode_pfm(&read(path)?, path)
}

/// An 8-bit RGB image, row-major, interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    /// `[3, H, W]` in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let n = self.height * self.width;
        Tensor::from_fn([3, self.height, self.width], |i| self.data[(i % n) * 3 + i / n] as f32 / 255.0)
    }

    /// Inverse of [`RgbImage::to_tensor`] with rounding and clamping.
    pub fn from_tensor(t: &Tensor<f32>) -> Self {
        let d = t.dims();
        let (h, w) = (d[1], d[2]);
        let n = h * w;
        let mut data = vec![0u8; 3 * n];
        for (i, &v) in t.data().iter().enumerate() {
            data[(i % n) * 3 + i / n] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        RgbImage { height: h, width: w, data }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let (tok, start) = header(bytes, 4, path)?;
    if tok[0].0 != "P6" {
        return Err(MvsError::parse(path, 0, format!("expected 'P6', found '{}'", tok[0].0)));
    }
    let (w, h) = dims(&tok[1..3], path)?;
    if tok[3].0 != "255" {
        return Err(MvsError::parse(path, tok[3].1, "only maxval 255 is supported"));
    }
    let need = w * h * 3;
    if bytes.len() - start < need {
        return Err(MvsError::parse(path, bytes.len(), format!("payload needs {need} bytes")));
    }
    Ok(RgbImage {
        height: h,
        width: w,
        data: bytes[start..start + need].to_vec(),
    })
}

pub fn save_image(path: &Path, img: &RgbImage) -> Result<()> {
    write(path, &encode_ppm(img))
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    decode_ppm(&read(path)?, path)
}

/// Binary grayscale PGM, for inspecting masks.
pub fn save_mask(path: &Path, mask: &[bool], height: usize, width: usize) -> Result<()> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(mask.iter().map(|&m| if m { 255u8 } else { 0 }));
    write(path, &out)
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    write(path, bytes)
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    read(path)
}
