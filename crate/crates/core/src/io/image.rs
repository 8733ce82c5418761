use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Planar RGB image with values in `[0, 1]`, channel-major `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Interleaved 8-bit samples, each `round(255 v)` after clamping.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(3 * self.pixels());
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    out.push(quantize8(self.at(c, y, x)));
                }
            }
        }
        out
    }

    pub fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != 3 * width * height {
            return Err(Error::Format(format!(
                "{} bytes for {width}x{height} RGB",
                rgb.len()
            )));
        }
        Ok(Self::from_fn(width, height, |c, y, x| {
            rgb[(y * width + x) * 3 + c] as f32 / 255.0
        }))
    }

    /// Values clamped to `[0, 1]` and snapped to the 8-bit grid.
    pub fn quantized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|&v| quantize8(v) as f32 / 255.0)
                .collect(),
        }
    }

    /// Extends to multiples of `multiple` by repeating the last row/column.
    pub fn pad_replicate(&self, multiple: usize) -> Self {
        let w = self.width.div_ceil(multiple) * multiple;
        let h = self.height.div_ceil(multiple) * multiple;
        self.pad_to(w, h)
    }

    pub fn pad_to(&self, width: usize, height: usize) -> Self {
        let (w0, h0) = (self.width, self.height);
        Self::from_fn(width.max(w0), height.max(h0), |c, y, x| {
            self.at(c, y.min(h0 - 1), x.min(w0 - 1))
        })
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Self {
        Self::from_fn(width, height, |c, y, x| self.at(c, y0 + y, x0 + x))
    }

    /// `[1, 3, H, W]`.
    pub fn to_tensor<F: Real>(&self) -> Tensor<F> {
        Tensor::from_fn(&[1, 3, self.height, self.width], |i| {
            F::c(self.data[i] as f64)
        })
    }

    /// First batch item of a `[B, 3, H, W]` tensor; values are kept as is.
    pub fn from_tensor<F: Real>(t: &Tensor<F>) -> Result<Self> {
        match *t.shape() {
            [_, 3, h, w] => Self::new(
                w,
                h,
                t.data()[..3 * h * w]
                    .iter()
                    .map(|v| v.f64() as f32)
                    .collect(),
            ),
            _ => Err(Error::Shape(format!("{:?} is not an RGB batch", t.shape()))),
        }
    }

    pub fn clamped(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }
}

pub fn quantize8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn skip_space_and_comments(bytes: &[u8], pos: &mut usize) {
    while *pos < bytes.len() {
        match bytes[*pos] {
            b'#' => {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            }
            b if b.is_ascii_whitespace() => *pos += 1,
            _ => break,
        }
    }
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    skip_space_and_comments(bytes, pos);
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("PPM header: bad {what}")))
}

/// Parses a binary PPM (`P6`, maxval 255).
pub fn parse_ppm(bytes: &[u8]) -> Result<Image> {
    if !bytes.starts_with(b"P6") {
        return Err(Error::Format("not a binary PPM (P6)".into()));
    }
    let mut pos = 2;
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!(
            "maxval {maxval} unsupported (only 255)"
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format("empty image".into()));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Format("PPM header: missing separator".into())),
    }
    let need = 3 * width * height;
    let pixels = bytes.get(pos..pos + need).ok_or_else(|| {
        Error::Format(format!(
            "truncated pixel data: {} of {need} bytes",
            bytes.len() - pos
        ))
    })?;
    Image::from_rgb8(width, height, pixels)
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_rgb8());
    out
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    parse_ppm(&std::fs::read(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        e => e,
    })
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    super::write_atomic(path, &encode_ppm(img))
}

/// 8-bit grayscale `P5`; `values` row-major, already in `0..=255`.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[u8]) -> Result<()> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(values);
    super::write_atomic(path, &out)
}
