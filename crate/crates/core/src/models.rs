//! The four predictors and their classifier inputs.
//!
//! Fusion is by channel concatenation in front of a shared trunk. Channel
//! order is fixed: image R, G, B first, then mask planes (frame `t` for C;
//! frames `t−n..t+n` in temporal order for D). All channels are scaled to `[0, 1]`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::Sample;
use crate::tensor::{ArchConfig, LayerSpec, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Image only.
    A,
    /// Mask heuristic; no classifier.
    B,
    /// Image + frame-`t` mask.
    C,
    /// Image + masks of frames `t−n..t+n`.
    D { n: usize },
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::A, Variant::B, Variant::C, Variant::D { n: 1 }];

    pub fn tag(&self) -> &'static str {
        match self {
            Variant::A => "A",
            Variant::B => "B",
            Variant::C => "C",
            Variant::D { .. } => "D",
        }
    }

    pub fn description(&self) -> &'static str {
        match self {
            Variant::A => "image",
            Variant::B => "mask heuristic",
            Variant::C => "image + mask",
            Variant::D { .. } => "image + temporal masks",
        }
    }

    pub fn has_classifier(&self) -> bool {
        !matches!(self, Variant::B)
    }

    /// Classifier input channels; variant B has none.
    pub fn input_channels(&self) -> Result<usize> {
        match *self {
            Variant::A => Ok(3),
            Variant::B => Err(unsupported_b()),
            Variant::C => Ok(4),
            Variant::D { n } => Ok(3 + 2 * n + 1),
        }
    }

    /// Mask frames a sample must carry on each side of `t`.
    pub fn required_radius(&self) -> usize {
        match *self {
            Variant::D { n } => n,
            _ => 0,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// `A`, `B`, `C`, `D` (radius 1) or `D<n>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Variant::A),
            "B" | "b" => Ok(Variant::B),
            "C" | "c" => Ok(Variant::C),
            "D" | "d" => Ok(Variant::D { n: 1 }),
            other => other
                .strip_prefix(['D', 'd'])
                .and_then(|n| n.parse().ok())
                .filter(|n| *n >= 1)
                .map(|n| Variant::D { n })
                .ok_or_else(|| {
                    Error::usage(format!("unknown variant {other:?} (expected A|B|C|D)"))
                }),
        }
    }
}

fn unsupported_b() -> Error {
    Error::Unsupported("variant B is the mask heuristic and has no classifier input".into())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Paper,
    Desk,
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Paper => "paper",
            Scale::Desk => "desk",
        })
    }
}

impl FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Scale::Paper),
            "desk" => Ok(Scale::Desk),
            other => Err(Error::usage(format!(
                "unknown scale {other:?} (expected paper|desk)"
            ))),
        }
    }
}

/// Classifier stack for `variant` at `scale`; only the stem's input channels vary.
pub fn build_config(variant: Variant, scale: Scale) -> Result<ArchConfig> {
    let c = variant.input_channels()?;
    Ok(match scale {
        Scale::Paper => ArchConfig::paper_scale(c),
        Scale::Desk => ArchConfig::desk_scale(c),
    })
}

/// Closed-form parameter difference between two variants' stems.
pub fn stem_param_delta(cfg: &ArchConfig, from: Variant, to: Variant) -> Result<i64> {
    let (kernel, out_channels) = match cfg.layers.first() {
        Some(LayerSpec::ConvStem {
            kernel,
            out_channels,
            ..
        }) => (*kernel, *out_channels),
        _ => return Err(Error::config("stack has no conv stem")),
    };
    let dc = to.input_channels()? as i64 - from.input_channels()? as i64;
    Ok((kernel * kernel * out_channels) as i64 * dc)
}

/// The sample's channels for `variant` at native resolution, as a 1×C×H×W tensor.
pub fn assemble_input(sample: &Sample, variant: Variant) -> Result<Tensor<f32>> {
    assemble_batch(&[sample], variant, (sample.height, sample.width))
}

/// Batch of samples for `variant`, box-downsampled by an integer factor to `hw`.
pub fn assemble_batch(
    samples: &[&Sample],
    variant: Variant,
    hw: (usize, usize),
) -> Result<Tensor<f32>> {
    let channels = variant.input_channels()?;
    let first = samples.first().ok_or_else(|| Error::data("empty batch"))?;
    let (h, w) = (first.height, first.width);
    if hw.0 == 0 || hw.1 == 0 || h % hw.0 != 0 || w % hw.1 != 0 || h / hw.0 != w / hw.1 {
        return Err(Error::config(format!(
            "samples of {h}x{w} cannot be reduced to {}x{} by one integer factor",
            hw.0, hw.1
        )));
    }
    let factor = h / hw.0;
    let need = variant.required_radius();
    let plane = hw.0 * hw.1;
    let mut values = Vec::with_capacity(samples.len() * channels * plane);
    for s in samples {
        if s.height != h || s.width != w {
            return Err(Error::data("samples of different sizes in one batch"));
        }
        let frames = s.frames();
        if frames == 0 || frames % 2 == 0 || frames / 2 < need {
            return Err(Error::data(format!(
                "variant {variant} needs masks for t±{need}, sample has {frames} frame(s)"
            )));
        }
        let center = frames / 2;
        for ch in 0..3 {
            push_plane(
                &mut values,
                &s.image[ch * h * w..(ch + 1) * h * w],
                w,
                factor,
            );
        }
        match variant {
            Variant::C => push_plane(&mut values, s.mask(center), w, factor),
            Variant::D { n } => {
                for k in center - n..=center + n {
                    push_plane(&mut values, s.mask(k), w, factor);
                }
            }
            _ => {}
        }
    }
    Tensor::from_vec(Shape::new(samples.len(), channels, hw.0, hw.1), values)
}

fn push_plane(out: &mut Vec<f32>, plane: &[u8], width: usize, factor: usize) {
    if factor == 1 {
        out.extend(plane.iter().map(|&v| v as f32 / 255.0));
        return;
    }
    let height = plane.len() / width;
    let norm = 1.0 / (255.0 * (factor * factor) as f32);
    for r in (0..height).step_by(factor) {
        for c in (0..width).step_by(factor) {
            let mut sum = 0u32;
            for dr in 0..factor {
                let row = &plane[(r + dr) * width + c..(r + dr) * width + c + factor];
                sum += row.iter().map(|&v| v as u32).sum::<u32>();
            }
            out.push(sum as f32 * norm);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_sample, DatasetRequest};
    use crate::tensor::{count_costs, TrainState};

    fn sample() -> Sample {
        generate_sample(&DatasetRequest::new(10, 3), 0)
    }

    #[test]
    fn input_shapes_per_variant() {
        let s = sample();
        assert_eq!(
            assemble_input(&s, Variant::A).unwrap().shape(),
            Shape::new(1, 3, 100, 100)
        );
        let c = assemble_input(&s, Variant::C).unwrap();
        assert_eq!(c.shape(), Shape::new(1, 4, 100, 100));
        let d = assemble_input(&s, Variant::D { n: 1 }).unwrap();
        assert_eq!(d.shape(), Shape::new(1, 6, 100, 100));
        for (k, ch) in (3..6).enumerate() {
            let back: Vec<u8> = d.item(0)[ch * 10_000..(ch + 1) * 10_000]
                .iter()
                .map(|v| (v * 255.0).round() as u8)
                .collect();
            assert_eq!(back, s.mask(k));
        }
        let back: Vec<u8> = c.item(0)[30_000..]
            .iter()
            .map(|v| (v * 255.0).round() as u8)
            .collect();
        assert_eq!(back, s.center_mask());
    }

    #[test]
    fn variant_b_and_missing_frames_error() {
        let s = sample();
        assert!(matches!(
            assemble_input(&s, Variant::B),
            Err(Error::Unsupported(_))
        ));
        assert!(matches!(
            build_config(Variant::B, Scale::Desk),
            Err(Error::Unsupported(_))
        ));
        assert!(matches!(
            assemble_input(&s, Variant::D { n: 2 }),
            Err(Error::Data(_))
        ));
        let mut one = s.clone();
        one.masks = s.center_mask().to_vec();
        assert!(matches!(
            assemble_input(&one, Variant::D { n: 1 }),
            Err(Error::Data(_))
        ));
        assert!(assemble_input(&one, Variant::C).is_ok());
    }

    #[test]
    fn downsampling_averages_blocks() {
        let s = sample();
        let full = assemble_input(&s, Variant::A).unwrap();
        let half = assemble_batch(&[&s], Variant::A, (50, 50)).unwrap();
        assert_eq!(half.shape(), Shape::new(1, 3, 50, 50));
        let want = (full.get(0, 1, 20, 30)
            + full.get(0, 1, 20, 31)
            + full.get(0, 1, 21, 30)
            + full.get(0, 1, 21, 31))
            / 4.0;
        assert!((half.get(0, 1, 10, 15) - want).abs() < 1e-6);
        assert!(assemble_batch(&[&s], Variant::A, (30, 30)).is_err());
    }

    #[test]
    fn param_deltas_follow_stem_closed_form() {
        let a = count_costs(&build_config(Variant::A, Scale::Paper).unwrap())
            .unwrap()
            .params as i64;
        let c = count_costs(&build_config(Variant::C, Scale::Paper).unwrap())
            .unwrap()
            .params as i64;
        let d = count_costs(&build_config(Variant::D { n: 1 }, Scale::Paper).unwrap())
            .unwrap()
            .params as i64;
        assert_eq!(a, 3_081_997);
        assert_eq!(c - a, 288);
        assert_eq!(d - a, 3 * 288);
        let cfg = build_config(Variant::A, Scale::Paper).unwrap();
        assert_eq!(
            stem_param_delta(&cfg, Variant::A, Variant::D { n: 1 }).unwrap(),
            d - a
        );
        assert_eq!(
            build_config(Variant::D { n: 1 }, Scale::Paper)
                .unwrap()
                .input_channels,
            6
        );
    }

    #[test]
    fn zeroed_mask_kernels_reproduce_image_only_logits() {
        let s = sample();
        let a_cfg = build_config(Variant::A, Scale::Desk).unwrap();
        let c_cfg = build_config(Variant::C, Scale::Desk).unwrap();
        let mut c_state = TrainState::<f32>::new(&c_cfg, 5).unwrap();
        let mut a_state = TrainState::<f32>::new(&a_cfg, 5).unwrap();
        // copy C's weights into A, dropping the mask channel of the stem
        {
            let c_arrays: Vec<Vec<f32>> = c_state
                .weight_arrays()
                .iter()
                .map(|(_, v)| v.to_vec())
                .collect();
            for (k, dst) in a_state.weight_arrays_mut().into_iter().enumerate() {
                if k == 0 {
                    let stem: Vec<f32> = c_arrays[0]
                        .chunks(4 * 9)
                        .flat_map(|o| o[..27].to_vec())
                        .collect();
                    *dst = stem;
                } else {
                    *dst = c_arrays[k].clone();
                }
            }
        }
        for o in c_state.weight_arrays_mut()[0].chunks_mut(4 * 9) {
            o[27..].fill(0.0);
        }
        let xa = assemble_batch(&[&s], Variant::A, (50, 50)).unwrap();
        let xc = assemble_batch(&[&s], Variant::C, (50, 50)).unwrap();
        let pa = a_state.predict(&xa).unwrap();
        let pc = c_state.predict(&xc).unwrap();
        for (x, y) in pa.values().iter().zip(pc.values()) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn variant_tags_parse() {
        for v in Variant::ALL {
            assert_eq!(v.tag().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("D2".parse::<Variant>().unwrap(), Variant::D { n: 2 });
        assert!("E".parse::<Variant>().is_err());
    }
}
