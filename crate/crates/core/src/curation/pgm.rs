//! Minimal netpbm greymap reader (P5 binary, P2 ASCII).

use std::path::Path;

/// 8-bit grayscale raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Option<Self> {
        (width > 0 && height > 0 && pixels.len() == width * height).then_some(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Binary PGM encoding.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

struct Header<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.data.get(self.pos) {
            if b == b'#' {
                while self.data.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> Result<usize, String> {
        self.skip_space();
        let start = self.pos;
        while self.data.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.data[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("expected a number at byte {start}"))
    }
}

/// Decodes a PGM file. Samples are rescaled to 0..=255 when maxval differs.
pub fn decode_pgm(data: &[u8]) -> Result<GrayImage, String> {
    let binary = match data.get(..2) {
        Some(b"P5") => true,
        Some(b"P2") => false,
        _ => return Err("not a PGM file (expected P5 or P2)".into()),
    };
    let mut h = Header { data, pos: 2 };
    let width = h.number()?;
    let height = h.number()?;
    let maxval = h.number()?;
    if width == 0 || height == 0 {
        return Err("empty image".into());
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    let n = width * height;
    let scale = |v: usize| -> Result<u8, String> {
        if v > maxval {
            return Err(format!("sample {v} exceeds maxval {maxval}"));
        }
        Ok(((v * 255 + maxval / 2) / maxval) as u8)
    };
    let pixels = if binary {
        // exactly one whitespace byte separates the header from the raster
        let start = h.pos + 1;
        let raster = data
            .get(start..start + n)
            .ok_or_else(|| format!("raster truncated: need {n} bytes"))?;
        raster
            .iter()
            .map(|&b| scale(b as usize))
            .collect::<Result<Vec<_>, _>>()?
    } else {
        (0..n)
            .map(|_| h.number().and_then(scale))
            .collect::<Result<Vec<_>, _>>()?
    };
    Ok(GrayImage {
        width,
        height,
        pixels,
    })
}

pub fn read_pgm(path: &Path) -> Result<GrayImage, String> {
    let data = std::fs::read(path).map_err(|e| e.to_string())?;
    decode_pgm(&data)
}
