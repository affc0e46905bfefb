//! Difference hash (dHash).

use super::pgm::GrayImage;

const HASH_W: usize = 9;
const HASH_H: usize = 8;

/// Samples the image at the centre of each cell of a `w`×`h` grid with
/// bilinear interpolation.
fn resize_bilinear(img: &GrayImage, w: usize, h: usize) -> Vec<f64> {
    let coord = |i: usize, dst: usize, src: usize| -> (usize, usize, f64) {
        let s = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = s.floor() as usize;
        (lo, (lo + 1).min(src - 1), s - lo as f64)
    };
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let (y0, y1, fy) = coord(y, h, img.height);
        for x in 0..w {
            let (x0, x1, fx) = coord(x, w, img.width);
            let p = |xx, yy| f64::from(img.get(xx, yy));
            let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
            let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// 64-bit dHash. Bit 63 is row 0, column 0; a bit is set where a pixel is
/// brighter than its right neighbour.
pub fn compute_phash(img: &GrayImage) -> u64 {
    let small = resize_bilinear(img, HASH_W, HASH_H);
    let mut hash = 0u64;
    for r in 0..HASH_H {
        for c in 0..HASH_W - 1 {
            let bit = small[r * HASH_W + c] > small[r * HASH_W + c + 1];
            hash = (hash << 1) | u64::from(bit);
        }
    }
    hash
}

pub fn hamming(a: u64, b: u64) -> u32 {
    (a ^ b).count_ones()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Smooth two-frequency pattern used as the reference image.
    pub(crate) fn reference() -> GrayImage {
        GrayImage::from_fn(64, 64, |x, y| {
            let v = 128.0
                + 60.0 * ((x as f64) / 9.0).sin()
                + 50.0 * ((y as f64 + 2.0 * x as f64) / 14.0).cos();
            v.round().clamp(0.0, 255.0) as u8
        })
    }

    #[test]
    fn constant_image_hashes_to_zero() {
        assert_eq!(compute_phash(&GrayImage::from_fn(33, 17, |_, _| 90)), 0);
        assert_eq!(compute_phash(&GrayImage::from_fn(1, 1, |_, _| 90)), 0);
    }

    #[test]
    fn horizontal_ramps() {
        assert_eq!(
            compute_phash(&GrayImage::from_fn(90, 80, |x, _| 255 - x as u8)),
            u64::MAX
        );
        assert_eq!(
            compute_phash(&GrayImage::from_fn(90, 80, |x, _| x as u8)),
            0
        );
    }

    #[test]
    fn near_duplicate_vs_noise() {
        let base = reference();
        let h = compute_phash(&base);
        assert_eq!(hamming(h, compute_phash(&base.clone())), 0);

        let mut edited = base.clone();
        for y in 0..12 {
            for x in 0..12 {
                let i = y * 64 + x;
                edited.pixels[i] = 255 - edited.pixels[i];
            }
        }
        assert!(hamming(h, compute_phash(&edited)) <= 10);

        let mut state = 0x2545_f491_4f6c_dd1du64;
        let noise = GrayImage::from_fn(64, 64, |_, _| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 56) as u8
        });
        let d = hamming(h, compute_phash(&noise));
        assert!((20..=44).contains(&d), "distance to noise {d}");
    }
}
