//! Binary PPM (P6) and PGM (P5) encoding with 8-bit samples, plus a strict
//! parser for the same subset.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ClassMap, Tensor};

/// Fixed colours for class ids 0–7.
pub const LABEL_PALETTE: [[u8; 3]; 8] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PnmKind {
    /// P5
    Gray,
    /// P6
    Rgb,
}

impl PnmKind {
    fn magic(self) -> &'static [u8; 2] {
        match self {
            PnmKind::Gray => b"P5",
            PnmKind::Rgb => b"P6",
        }
    }

    fn channels(self) -> usize {
        match self {
            PnmKind::Gray => 1,
            PnmKind::Rgb => 3,
        }
    }
}

/// Decoded image: interleaved samples, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PnmImage {
    pub kind: PnmKind,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl PnmImage {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.pixels.len() + 20);
        out.extend_from_slice(self.kind.magic());
        out.extend_from_slice(format!("\n{} {}\n255\n", self.width, self.height).as_bytes());
        out.extend_from_slice(&self.pixels);
        out
    }
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round() as u8
}

/// 3×H×W tensor with values in [0, 1] → P6. Out-of-range values are an error.
pub fn encode_rgb(data: &Tensor) -> Result<PnmImage> {
    let (h, w) = match data.shape() {
        [3, h, w] | [1, 3, h, w] => (*h, *w),
        s => return Err(Error::shape("encode_rgb", format!("expected 3×H×W, got {s:?}"))),
    };
    if let Some(bad) = data.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::domain(
            "encode_rgb",
            format!("value {bad} outside [0, 1]"),
        ));
    }
    let hw = h * w;
    let mut pixels = Vec::with_capacity(3 * hw);
    for p in 0..hw {
        for c in 0..3 {
            pixels.push(quantize(data.data()[c * hw + p]));
        }
    }
    Ok(PnmImage {
        kind: PnmKind::Rgb,
        width: w,
        height: h,
        pixels,
    })
}

/// 1×H×W (or B=1 map) → P5 after min-max normalisation. A constant map
/// encodes as all zeros.
pub fn encode_gray(data: &Tensor) -> Result<PnmImage> {
    let (h, w) = match data.shape() {
        [1, h, w] | [1, 1, h, w] => (*h, *w),
        s => return Err(Error::shape("encode_gray", format!("expected 1×H×W, got {s:?}"))),
    };
    if !data.is_finite() {
        return Err(Error::domain("encode_gray", "non-finite value"));
    }
    let lo = data.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let pixels = data
        .data()
        .iter()
        .map(|&v| if span > 0.0 { quantize((v - lo) / span) } else { 0 })
        .collect();
    Ok(PnmImage {
        kind: PnmKind::Gray,
        width: w,
        height: h,
        pixels,
    })
}

/// Class map (batch of one) → P6 through [`LABEL_PALETTE`].
pub fn encode_labels(map: &ClassMap) -> Result<PnmImage> {
    if map.batch() != 1 {
        return Err(Error::shape("encode_labels", "expected a single map"));
    }
    let mut pixels = Vec::with_capacity(3 * map.data().len());
    for &id in map.data() {
        let color = LABEL_PALETTE.get(usize::from(id)).ok_or_else(|| {
            Error::domain("encode_labels", format!("class id {id} has no palette colour"))
        })?;
        pixels.extend_from_slice(color);
    }
    Ok(PnmImage {
        kind: PnmKind::Rgb,
        width: map.width(),
        height: map.height(),
        pixels,
    })
}

/// What [`write_image`] should interpret its tensor as.
pub enum ImageData<'a> {
    Rgb(&'a Tensor),
    Gray(&'a Tensor),
    Labels(&'a ClassMap),
}

/// Encode and atomically write an image file.
pub fn write_image(path: &Path, data: ImageData<'_>) -> Result<()> {
    let img = match data {
        ImageData::Rgb(t) => encode_rgb(t)?,
        ImageData::Gray(t) => encode_gray(t)?,
        ImageData::Labels(m) => encode_labels(m)?,
    };
    crate::checkpoint::write_atomic(path, &img.encode())
}

fn skip_space(bytes: &[u8], pos: &mut usize) -> Result<()> {
    let start = *pos;
    while *pos < bytes.len() {
        match bytes[*pos] {
            b' ' | b'\t' | b'\n' | b'\r' => *pos += 1,
            b'#' => {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            }
            _ => break,
        }
    }
    if *pos == start {
        return Err(Error::Image(format!("expected whitespace at byte {start}")));
    }
    Ok(())
}

fn read_uint(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let start = *pos;
    let mut v: usize = 0;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        v = v
            .checked_mul(10)
            .and_then(|v| v.checked_add(usize::from(bytes[*pos] - b'0')))
            .ok_or_else(|| Error::Image(format!("number too large at byte {start}")))?;
        *pos += 1;
    }
    if *pos == start {
        return Err(Error::Image(format!("expected a number at byte {start}")));
    }
    Ok(v)
}

/// Parse a P5 or P6 file with maxval 255.
pub fn parse(bytes: &[u8]) -> Result<PnmImage> {
    let kind = match bytes.get(..2) {
        Some(b"P5") => PnmKind::Gray,
        Some(b"P6") => PnmKind::Rgb,
        _ => return Err(Error::Image("missing P5/P6 magic".into())),
    };
    let mut pos = 2;
    skip_space(bytes, &mut pos)?;
    let width = read_uint(bytes, &mut pos)?;
    skip_space(bytes, &mut pos)?;
    let height = read_uint(bytes, &mut pos)?;
    skip_space(bytes, &mut pos)?;
    let maxval = read_uint(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(Error::Image(format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the payload
    match bytes.get(pos) {
        Some(b' ' | b'\t' | b'\n' | b'\r') => pos += 1,
        _ => return Err(Error::Image("missing separator before payload".into())),
    }
    if width == 0 || height == 0 {
        return Err(Error::Image(format!("empty image {width}×{height}")));
    }
    let len = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(kind.channels()))
        .ok_or_else(|| Error::Image("image dimensions overflow".into()))?;
    let payload = &bytes[pos..];
    if payload.len() != len {
        return Err(Error::Image(format!(
            "payload has {} bytes, header implies {len}",
            payload.len()
        )));
    }
    Ok(PnmImage {
        kind,
        width,
        height,
        pixels: payload.to_vec(),
    })
}
