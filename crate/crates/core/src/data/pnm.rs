//! Binary netpbm codecs: P6 for RGB images, P5 for class-index masks.
//!
//! Writers always emit the minimal header `P6\n<W> <H>\n255\n` (or `P5`).
//! Readers accept any whitespace and `#` comments between header fields, but
//! only maxval 255.

use crate::error::{Error, Result};
use crate::mil::SegmentationMask;
use crate::tensor::Tensor;

/// 8-bit quantization with round-half-up.
pub fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn dequantize(b: u8) -> f64 {
    b as f64 / 255.0
}

fn header(magic: &str, width: usize, height: usize) -> Vec<u8> {
    format!("{magic}\n{width} {height}\n255\n").into_bytes()
}

/// Encodes a `[3, H, W]` image with values in `[0, 1]`.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::Invalid(format!(
            "PPM needs 3 channels, image has {}",
            c
        )));
    }
    if let Some(v) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Invalid(format!(
            "PPM pixel value {} outside [0, 1]",
            v
        )));
    }
    let plane = h * w;
    let d = image.data();
    let rgb: Vec<u8> = (0..plane)
        .flat_map(|p| [d[p], d[plane + p], d[2 * plane + p]])
        .map(quantize)
        .collect();
    Ok(encode_rgb8(w, h, &rgb))
}

/// Encodes interleaved RGB bytes.
pub fn encode_rgb8(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), 3 * width * height);
    let mut out = header("P6", width, height);
    out.extend_from_slice(rgb);
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let (w, h, body) = parse(bytes, b"P6", "PPM", 3)?;
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            data[c * plane + p] = dequantize(body[3 * p + c]);
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// One byte per pixel, the class index.
pub fn encode_pgm(mask: &SegmentationMask) -> Vec<u8> {
    let mut out = header("P5", mask.width(), mask.height());
    out.extend_from_slice(mask.labels());
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<SegmentationMask> {
    let (w, h, body) = parse(bytes, b"P5", "PGM", 1)?;
    SegmentationMask::new(h, w, body.to_vec())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    kind: &'static str,
}

impl Cursor<'_> {
    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            kind: self.kind,
            offset: self.pos,
            msg: msg.into(),
        })
    }

    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return self.fail(format!("expected {what}"));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        match text.parse() {
            Ok(v) => Ok(v),
            Err(_) => {
                self.pos = start;
                self.fail(format!("{what} {text} does not fit"))
            }
        }
    }
}

/// Returns `(width, height, payload)` after validating the header.
fn parse<'a>(
    bytes: &'a [u8],
    magic: &[u8; 2],
    kind: &'static str,
    channels: usize,
) -> Result<(usize, usize, &'a [u8])> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        kind,
    };
    if bytes.len() < 2 || &bytes[..2] != magic {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return cur.fail(format!(
            "expected magic {} but found {:?}",
            String::from_utf8_lossy(magic),
            found
        ));
    }
    cur.pos = 2;
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return cur.fail(format!("unsupported maxval {maxval}, only 255 is accepted"));
    }
    if width == 0 || height == 0 {
        return cur.fail(format!("empty image {width}x{height}"));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return cur.fail("expected a single whitespace byte after maxval"),
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels));
    let Some(need) = need else {
        return cur.fail(format!("dimensions {width}x{height} overflow"));
    };
    let body = &bytes[cur.pos..];
    if body.len() < need {
        cur.pos = bytes.len();
        return cur.fail(format!(
            "payload truncated: {} of {} bytes present",
            body.len(),
            need
        ));
    }
    if body.len() > need {
        cur.pos += need;
        return cur.fail(format!("{} trailing bytes after payload", body.len() - need));
    }
    Ok((width, height, body))
}

/// Fixed class palette: the usual bit-interleaved segmentation colormap,
/// with class 0 black.
pub fn palette_color(class: u8) -> [u8; 3] {
    let mut rgb = [0u8; 3];
    let mut c = class;
    for shift in (0..8).rev() {
        for (ch, slot) in rgb.iter_mut().enumerate() {
            *slot |= ((c >> ch) & 1) << shift;
        }
        c >>= 3;
        if c == 0 {
            break;
        }
    }
    rgb
}

/// Renders a mask through [`palette_color`] as a PPM.
pub fn encode_color_mask(mask: &SegmentationMask) -> Vec<u8> {
    let rgb: Vec<u8> = mask
        .labels()
        .iter()
        .flat_map(|&l| palette_color(l))
        .collect();
    encode_rgb8(mask.width(), mask.height(), &rgb)
}
