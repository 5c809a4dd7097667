//! Binary PPM (P6, maxval ≤ 255) images as `[1, 3, H, W]` tensors in `[0, 1]`.

use std::path::Path;

use crate::error::ImageError;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb8 {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub data: Vec<u8>,
}

fn header_token<'a>(b: &'a [u8], pos: &mut usize) -> Result<&'a [u8], ImageError> {
    loop {
        while *pos < b.len() && b[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < b.len() && b[*pos] == b'#' {
            while *pos < b.len() && b[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < b.len() && !b[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(ImageError::Truncated);
    }
    Ok(&b[start..*pos])
}

fn number(b: &[u8], pos: &mut usize, what: &str) -> Result<u32, ImageError> {
    let t = header_token(b, pos)?;
    std::str::from_utf8(t)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| ImageError::Format(format!("bad {what}")))
}

impl Rgb8 {
    pub fn parse_ppm(b: &[u8]) -> Result<Self, ImageError> {
        let mut pos = 0;
        if header_token(b, &mut pos)? != b"P6" {
            return Err(ImageError::Format("missing P6 magic".into()));
        }
        let width = number(b, &mut pos, "width")? as usize;
        let height = number(b, &mut pos, "height")? as usize;
        let maxval = number(b, &mut pos, "maxval")?;
        if maxval == 0 || maxval > 255 {
            return Err(ImageError::MaxVal(maxval));
        }
        if width == 0 || height == 0 {
            return Err(ImageError::Format(format!("empty image {width}x{height}")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let n = width * height * 3;
        let raster = b.get(pos..pos + n).ok_or(ImageError::Truncated)?;
        let data = if maxval == 255 {
            raster.to_vec()
        } else {
            raster
                .iter()
                .map(|&v| ((v.min(maxval as u8) as u32 * 255 + maxval / 2) / maxval) as u8)
                .collect()
        };
        Ok(Self { width, height, data })
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn read(path: &Path) -> Result<Self, ImageError> {
        Self::parse_ppm(&std::fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<(), ImageError> {
        std::fs::write(path, self.to_ppm())?;
        Ok(())
    }

    pub fn to_tensor<F: Element>(&self) -> Tensor<F> {
        let (h, w) = (self.height, self.width);
        let mut t = Tensor::zeros([1, 3, h, w]);
        for i in 0..h {
            for j in 0..w {
                for c in 0..3 {
                    t.set(0, c, i, j, F::c(self.data[(i * w + j) * 3 + c] as f64 / 255.0));
                }
            }
        }
        t
    }

    /// Clamps to `[0, 1]` and rounds to 8 bits.
    pub fn from_tensor<F: Element>(t: &Tensor<F>) -> Result<Self, ImageError> {
        let [b, c, h, w] = t.shape();
        if b != 1 || c != 3 {
            return Err(ImageError::Format(format!("cannot store tensor {:?} as RGB", t.shape())));
        }
        let mut data = vec![0u8; h * w * 3];
        for i in 0..h {
            for j in 0..w {
                for ch in 0..3 {
                    let v = t.at(0, ch, i, j).f64().clamp(0.0, 1.0);
                    data[(i * w + j) * 3 + ch] = (v * 255.0).round() as u8;
                }
            }
        }
        Ok(Self {
            width: w,
            height: h,
            data,
        })
    }
}
