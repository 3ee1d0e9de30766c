//! Dot-plot rendering, resizing, pair composition and binary PGM I/O.
//!
//! Images stay in `f64` until they are written; [`write_pgm`] is the only
//! place intensities are quantized to 8 bits.

use thiserror::Error;

use crate::bppm::Bppm;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ImageError {
    #[error("image sides differ: {a} vs {b}")]
    SideMismatch { a: usize, b: usize },
    #[error("malformed PGM header: {0}")]
    MalformedHeader(String),
    #[error("truncated PGM payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

/// Square single-channel image, row-major, intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    side: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn zeros(side: usize) -> Self {
        Self::filled(side, 0.0)
    }

    pub fn filled(side: usize, value: f64) -> Self {
        Self {
            side,
            pixels: vec![value; side * side],
        }
    }

    /// Wraps row-major pixels; panics if the length is not `side * side` or
    /// a value falls outside `[0, 1]`.
    pub fn from_pixels(side: usize, pixels: Vec<f64>) -> Self {
        assert_eq!(pixels.len(), side * side, "pixel count does not match side");
        assert!(
            pixels.iter().all(|p| (0.0..=1.0).contains(p)),
            "intensity outside [0, 1]"
        );
        Self { side, pixels }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    /// Pixel at 0-based `(row, col)`.
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.side + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!((0.0..=1.0).contains(&value));
        self.pixels[row * self.side + col] = value;
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.side).all(|r| (0..r).all(|c| self.get(r, c) == self.get(c, r)))
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.side);
        for r in 0..self.side {
            for c in 0..self.side {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    /// `(min, max)` intensity; `(0, 0)` for an empty image.
    pub fn range(&self) -> (f64, f64) {
        if self.pixels.is_empty() {
            return (0.0, 0.0);
        }
        self.pixels
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &p| (lo.min(p), hi.max(p)))
    }
}

/// How a pair probability maps to a pixel intensity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Transfer {
    /// Intensity equals the probability.
    #[default]
    Linear,
    /// Intensity is the square root of the probability.
    Sqrt,
}

/// Symmetric dot-plot with an empty diagonal, linear intensities.
pub fn bppm_to_image(b: &Bppm) -> GrayImage {
    bppm_to_image_with(b, Transfer::Linear)
}

pub fn bppm_to_image_with(b: &Bppm, transfer: Transfer) -> GrayImage {
    let mut img = GrayImage::zeros(b.n());
    for (i, j, p) in b.entries() {
        let v = match transfer {
            Transfer::Linear => p,
            Transfer::Sqrt => p.sqrt(),
        };
        img.set(i - 1, j - 1, v);
        img.set(j - 1, i - 1, v);
    }
    img
}

/// Sample positions and weights along one axis with half-pixel centers.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    let last = (src - 1) as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    (a + t * (b - a)).clamp(a.min(b), a.max(b))
}

/// Bilinear resampling to `target x target`.
pub fn resize_bilinear(img: &GrayImage, target: usize) -> GrayImage {
    assert!(target > 0, "target side must be positive");
    if img.side == 0 {
        return GrayImage::zeros(target);
    }
    let taps = axis_taps(img.side, target);
    let mut out = GrayImage::zeros(target);
    for (r, &(r0, r1, tr)) in taps.iter().enumerate() {
        for (c, &(c0, c1, tc)) in taps.iter().enumerate() {
            let top = lerp(img.get(r0, c0), img.get(r0, c1), tc);
            let bottom = lerp(img.get(r1, c0), img.get(r1, c1), tc);
            out.set(r, c, lerp(top, bottom, tr));
        }
    }
    out
}

/// Upper-right triangle from `a`, lower-left from `b`, zero diagonal.
pub fn compose_pair(a: &GrayImage, b: &GrayImage) -> Result<GrayImage, ImageError> {
    if a.side != b.side {
        return Err(ImageError::SideMismatch { a: a.side, b: b.side });
    }
    let mut out = GrayImage::zeros(a.side);
    for r in 0..a.side {
        for c in 0..a.side {
            if r < c {
                out.set(r, c, a.get(r, c));
            } else if r > c {
                out.set(r, c, b.get(r, c));
            }
        }
    }
    Ok(out)
}

/// `round(255 * v)`, halves away from zero.
pub fn quantize(v: f64) -> u8 {
    (255.0 * v).round().clamp(0.0, 255.0) as u8
}

/// Binary PGM (`P5`, maxval 255).
pub fn write_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.side, img.side).into_bytes();
    out.extend(img.pixels.iter().map(|&v| quantize(v)));
    out
}

/// Reads a square binary PGM with maxval 255. Comments in the header are
/// skipped.
pub fn read_pgm(bytes: &[u8]) -> Result<GrayImage, ImageError> {
    let bad = |m: &str| ImageError::MalformedHeader(m.to_string());
    if !bytes.starts_with(b"P5") {
        return Err(bad("missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
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
        if start == pos {
            return Err(bad("expected a number"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| bad("number out of range"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    if width != height {
        return Err(bad("image is not square"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing whitespace after maxval"));
    }
    pos += 1;
    let expected = width * height;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(ImageError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    Ok(GrayImage {
        side: width,
        pixels: payload[..expected].iter().map(|&b| b as f64 / 255.0).collect(),
    })
}
