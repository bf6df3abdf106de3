use std::path::Path;

use super::eval::Predictor;
use crate::error::Result;
use crate::scene::Sample;

pub const GLYPH_COLOR: [u8; 3] = [160, 32, 240];
pub const GLYPH_ORIGIN: (usize, usize) = (4, 4);
const MASK_COLOR: [u8; 3] = [0, 255, 0];

/// 5 columns × 7 rows per digit, one bit per column (MSB = leftmost).
const DIGITS: [[u8; 7]; 5] = [
    [
        0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110,
    ],
    [
        0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110,
    ],
    [
        0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111,
    ],
    [
        0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110,
    ],
    [
        0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010,
    ],
];

/// Interleaved RGB of the sample image with the frame-`t` mask blended in
/// green at 50% and `digit` drawn in purple at [`GLYPH_ORIGIN`].
pub fn overlay_rgb(sample: &Sample, digit: u8) -> Vec<u8> {
    let (h, w) = (sample.height, sample.width);
    let plane = h * w;
    let mask = sample.center_mask();
    let mut rgb = vec![0u8; 3 * plane];
    for at in 0..plane {
        for ch in 0..3 {
            let v = sample.image[ch * plane + at];
            rgb[3 * at + ch] = if mask[at] != 0 {
                ((v as u16 + MASK_COLOR[ch] as u16 + 1) / 2) as u8
            } else {
                v
            };
        }
    }
    let dot = (w / 50).max(1);
    let glyph = &DIGITS[(digit as usize).min(4)];
    for (gr, bits) in glyph.iter().enumerate() {
        for gc in 0..5 {
            if bits & (0b10000 >> gc) == 0 {
                continue;
            }
            for dr in 0..dot {
                for dc in 0..dot {
                    let (r, c) = (
                        GLYPH_ORIGIN.1 + gr * dot + dr,
                        GLYPH_ORIGIN.0 + gc * dot + dc,
                    );
                    if r < h && c < w {
                        rgb[3 * (r * w + c)..3 * (r * w + c) + 3].copy_from_slice(&GLYPH_COLOR);
                    }
                }
            }
        }
    }
    rgb
}

/// Binary PPM (P6) encoding.
pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Predicts `sample` and writes the overlay to `out`; returns the prediction.
pub fn predict_overlay(predictor: &Predictor, sample: &Sample, out: &Path) -> Result<u8> {
    let digit = predictor.predict(&[sample])?[0];
    let rgb = overlay_rgb(sample, digit);
    std::fs::write(out, encode_ppm(sample.width, sample.height, &rgb))?;
    Ok(digit)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_glyph_marks_the_origin_region() {
        for (d, glyph) in DIGITS.iter().enumerate() {
            assert!(
                glyph.iter().any(|row| row & 0b11000 != 0),
                "digit {d} leaves the left columns blank"
            );
            assert!(glyph[0] != 0 && glyph[6] != 0);
        }
    }
}
