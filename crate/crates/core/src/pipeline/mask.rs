//! Binary PPM images and the masked output frame.

use super::replay::FrameDecision;
use super::PipelineError;
use std::path::Path;

/// 8-bit RGB image, rows top to bottom.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: rgb.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    /// Parses a P6 image with maxval 255.
    pub fn from_ppm(bytes: &[u8]) -> Result<Self, PipelineError> {
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
                return Err(PipelineError::Image("truncated header".into()));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| PipelineError::Image("header is not ASCII".into()))?);
        }
        if fields[0] != "P6" {
            return Err(PipelineError::Image(format!("magic {:?}, expected P6", fields[0])));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| PipelineError::Image(format!("bad header field {s:?}")));
        let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval != 255 {
            return Err(PipelineError::Image(format!("maxval {maxval}, only 255 is supported")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let n = width * height * 3;
        if bytes.len() < pos + n {
            return Err(PipelineError::Image(format!("raster has {} bytes, expected {n}", bytes.len().saturating_sub(pos))));
        }
        Ok(Self {
            width,
            height,
            pixels: bytes[pos..pos + n].to_vec(),
        })
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        Self::from_ppm(&std::fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PipelineError> {
        std::fs::write(path, self.to_ppm())?;
        Ok(())
    }
}

/// Pixel rectangle `[x0, x1) x [y0, y1)` covered by a centered box, clamped
/// to the image.
pub fn box_pixels(u: f64, v: f64, w: f64, h: f64, width: usize, height: usize) -> (usize, usize, usize, usize) {
    let clamp = |x: f64, hi: usize| x.clamp(0.0, hi as f64) as usize;
    (
        clamp((u - w / 2.0).floor(), width),
        clamp((u + w / 2.0).ceil(), width),
        clamp((v - h / 2.0).floor(), height),
        clamp((v + h / 2.0).ceil(), height),
    )
}

/// The background with the kept boxes copied in from the live frame.
pub fn compose_mask(frame: &Image, background: &Image, decision: &FrameDecision) -> Result<Image, PipelineError> {
    if frame.width != background.width || frame.height != background.height {
        return Err(PipelineError::DimensionMismatch {
            want_w: background.width,
            want_h: background.height,
            got_w: frame.width,
            got_h: frame.height,
        });
    }
    let mut out = background.clone();
    for b in decision.kept() {
        let (x0, x1, y0, y1) = box_pixels(b.u_px, b.v_px, b.w_px, b.h_px, frame.width, frame.height);
        for y in y0..y1 {
            let row = (y * frame.width) * 3;
            out.pixels[row + x0 * 3..row + x1 * 3].copy_from_slice(&frame.pixels[row + x0 * 3..row + x1 * 3]);
        }
    }
    Ok(out)
}
