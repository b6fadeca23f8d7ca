//! Binary netpbm: P5 (gray) and P6 (RGB), maxval 255. Colour input is
//! converted to full-range BT.601 YCbCr.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorSpace {
    Gray,
    YCbCr,
}

/// Chroma planes in `[0, 1]`, neutral at 0.5.
#[derive(Debug, Clone, PartialEq)]
pub struct Chroma {
    pub cb: Tensor,
    pub cr: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    /// `[H, W]` luminance (or gray level) in `[0, 1]`.
    pub luma: Tensor,
    pub chroma: Option<Chroma>,
}

impl Image {
    pub fn gray(luma: Tensor) -> Self {
        Self { luma, chroma: None }
    }

    pub fn color_space(&self) -> ColorSpace {
        if self.chroma.is_some() {
            ColorSpace::YCbCr
        } else {
            ColorSpace::Gray
        }
    }

    pub fn height(&self) -> usize {
        self.luma.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.luma.shape()[1]
    }
}

const KR: f64 = 0.299;
const KG: f64 = 0.587;
const KB: f64 = 0.114;

pub fn rgb_to_ycbcr(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let y = KR * r + KG * g + KB * b;
    (y, 0.5 + (b - y) / (2.0 * (1.0 - KB)), 0.5 + (r - y) / (2.0 * (1.0 - KR)))
}

pub fn ycbcr_to_rgb(y: f64, cb: f64, cr: f64) -> (f64, f64, f64) {
    let r = y + 2.0 * (1.0 - KR) * (cr - 0.5);
    let b = y + 2.0 * (1.0 - KB) * (cb - 0.5);
    let g = (y - KR * r - KB * b) / KG;
    (r, g, b)
}

/// Clamps to `[0, 1]` and rounds half up to a byte.
pub fn to_byte(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor() as u8
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let bad = |msg: &str| Error::Image(msg.to_string());
    if bytes.len() < 2 || bytes[0] != b'P' || !matches!(bytes[1], b'5' | b'6') {
        return Err(bad("expected a P5 or P6 magic number"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
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
        if start == pos {
            return Err(bad("truncated or non-numeric header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("header value out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing whitespace after maxval"));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Image(format!("unsupported maxval {maxval} (only 255)")));
    }
    if width == 0 || height == 0 {
        return Err(bad("zero image extent"));
    }
    Ok(Header {
        magic: [bytes[0], bytes[1]],
        width,
        height,
        offset: pos + 1,
    })
}

pub fn decode(bytes: &[u8]) -> Result<Image> {
    let hdr = parse_header(bytes)?;
    let channels = if hdr.magic[1] == b'5' { 1 } else { 3 };
    let n = hdr.width * hdr.height;
    let payload = bytes
        .get(hdr.offset..hdr.offset + n * channels)
        .ok_or_else(|| Error::Image(format!("truncated payload: need {} bytes, have {}", n * channels, bytes.len().saturating_sub(hdr.offset))))?;
    let shape = [hdr.height, hdr.width];
    let unit = |b: u8| b as f64 / 255.0;
    if channels == 1 {
        return Ok(Image::gray(Tensor::from_fn(&shape, |k| unit(payload[k]))));
    }
    let mut y = Vec::with_capacity(n);
    let mut cb = Vec::with_capacity(n);
    let mut cr = Vec::with_capacity(n);
    for px in payload.chunks_exact(3) {
        let (a, b, c) = rgb_to_ycbcr(unit(px[0]), unit(px[1]), unit(px[2]));
        y.push(a);
        cb.push(b);
        cr.push(c);
    }
    Ok(Image {
        luma: Tensor::new(shape.to_vec(), y)?,
        chroma: Some(Chroma {
            cb: Tensor::new(shape.to_vec(), cb)?,
            cr: Tensor::new(shape.to_vec(), cr)?,
        }),
    })
}

/// P5 for gray images, P6 (via inverse BT.601) when chroma is present.
pub fn encode(img: &Image) -> Result<Vec<u8>> {
    let (h, w) = img.luma.dims2()?;
    let magic = if img.chroma.is_some() { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    match &img.chroma {
        None => out.extend(img.luma.data().iter().map(|&v| to_byte(v))),
        Some(c) => {
            c.cb.expect_shape(&[h, w], "cb plane")?;
            c.cr.expect_shape(&[h, w], "cr plane")?;
            for ((&y, &cb), &cr) in img.luma.data().iter().zip(c.cb.data()).zip(c.cr.data()) {
                let (r, g, b) = ycbcr_to_rgb(y, cb, cr);
                out.extend([to_byte(r), to_byte(g), to_byte(b)]);
            }
        }
    }
    Ok(out)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::at_path(path, e))?;
    decode(&bytes)
}

pub fn write_image(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    atomic_write(path, &encode(img)?)
}
