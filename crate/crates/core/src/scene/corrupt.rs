use rand::Rng;
use serde::{Deserialize, Serialize};

use super::render::{LineMask, Mask, CLUTTER_ID};
use crate::error::{Error, Result};

/// Detector-failure model applied independently to every frame's mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorruptionConfig {
    /// Probability that a whole boundary line is erased.
    pub line_dropout_p: f64,
    /// Per-pixel flip probability.
    pub pixel_flip_q: f64,
    /// Largest per-line change of stroke half-width, in pixels per row side.
    pub thickness_jitter: usize,
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("line_dropout_p", self.line_dropout_p),
            ("pixel_flip_q", self.pixel_flip_q),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.line_dropout_p == 0.0 && self.pixel_flip_q == 0.0 && self.thickness_jitter == 0
    }
}

/// Erases whole boundary lines, jitters stroke widths, then flips pixels.
///
/// Every line consumes the same two uniforms whatever the configuration, and
/// erasure is `u < p`, so raising `p` with a fixed stream only erases more.
pub fn corrupt(lines: &LineMask, cfg: &CorruptionConfig, rng: &mut impl Rng) -> Mask {
    let mut ids = lines.ids.clone();
    let mut erased = [false; 256];
    let mut delta = [0i64; 256];
    for id in lines.line_ids() {
        let u: f64 = rng.random();
        let v: f64 = rng.random();
        if id == CLUTTER_ID {
            continue;
        }
        erased[id as usize] = u < cfg.line_dropout_p;
        let j = cfg.thickness_jitter as i64;
        delta[id as usize] = ((v * (2 * j + 1) as f64).floor() as i64).min(2 * j) - j;
    }
    if cfg.thickness_jitter > 0 {
        adjust_runs(&mut ids, lines.width, &delta);
    }
    let mut data: Vec<u8> = ids
        .iter()
        .map(|&id| {
            if id != 0 && !erased[id as usize] {
                255
            } else {
                0
            }
        })
        .collect();
    for px in data.iter_mut() {
        if rng.random::<f64>() < cfg.pixel_flip_q {
            *px = 255 - *px;
        }
    }
    Mask {
        width: lines.width,
        height: lines.height,
        data,
    }
}

/// Grows or shrinks every horizontal run of a line by `delta[id]` pixels per
/// side, keeping at least the run's center pixel. Growth only claims background.
fn adjust_runs(ids: &mut [u8], width: usize, delta: &[i64; 256]) {
    for row in ids.chunks_mut(width) {
        let src = row.to_vec();
        let mut col = 0;
        while col < width {
            let id = src[col];
            let start = col;
            while col < width && src[col] == id {
                col += 1;
            }
            let d = delta[id as usize];
            if id == 0 || id == CLUTTER_ID || d == 0 {
                continue;
            }
            let (start, end) = (start as i64, col as i64);
            if d < 0 {
                let keep_lo = (start - d).min((start + end - 1) / 2);
                let keep_hi = (end + d).max(keep_lo + 1);
                for c in start..end {
                    if c < keep_lo || c >= keep_hi {
                        row[c as usize] = 0;
                    }
                }
            } else {
                for c in (start - d).max(0)..(end + d).min(width as i64) {
                    if src[c as usize] == 0 {
                        row[c as usize] = id;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_lines() -> LineMask {
        let (w, h) = (12, 4);
        let mut ids = vec![0u8; w * h];
        for r in 0..h {
            ids[r * w + 2..r * w + 5].fill(1);
            ids[r * w + 7..r * w + 10].fill(2);
        }
        LineMask {
            width: w,
            height: h,
            ids,
        }
    }

    #[test]
    fn zero_config_is_identity() {
        let m = two_lines();
        let out = corrupt(
            &m,
            &CorruptionConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(1),
        );
        assert_eq!(out, m.to_mask());
    }

    #[test]
    fn full_dropout_removes_every_line() {
        let cfg = CorruptionConfig {
            line_dropout_p: 1.0,
            ..Default::default()
        };
        let out = corrupt(&two_lines(), &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(out.positive(), 0);
    }

    #[test]
    fn thickness_changes_keep_center() {
        let m = two_lines();
        let mut d = [0i64; 256];
        d[1] = -3;
        d[2] = 1;
        let mut ids = m.ids.clone();
        adjust_runs(&mut ids, m.width, &d);
        assert_eq!(&ids[..12], &[0, 0, 0, 1, 0, 0, 2, 2, 2, 2, 2, 0]);
    }

    #[test]
    fn rejects_bad_probability() {
        assert!(CorruptionConfig {
            pixel_flip_q: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
