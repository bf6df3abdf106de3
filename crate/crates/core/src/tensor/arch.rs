use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lane-number classes `0..=4`.
pub const NUM_CLASSES: usize = 5;

/// One entry of a classifier layer stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Conv → ReLU.
    ConvStem {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    /// Conv → ReLU → BatchNorm → MaxPool → Dropout.
    ConvBlock {
        out_channels: usize,
        kernel: usize,
        pad: usize,
        pool: usize,
        dropout_rate: f64,
    },
    Flatten,
    /// Affine → ReLU → Dropout.
    Dense {
        out_units: usize,
        dropout_rate: f64,
    },
    /// Affine → softmax.
    SoftmaxOutput {
        classes: usize,
    },
}

impl LayerSpec {
    pub fn conv_stem(out_channels: usize) -> Self {
        LayerSpec::ConvStem {
            out_channels,
            kernel: 3,
            stride: 1,
            pad: 1,
        }
    }

    pub fn conv_block(out_channels: usize, dropout_rate: f64) -> Self {
        LayerSpec::ConvBlock {
            out_channels,
            kernel: 3,
            pad: 1,
            pool: 2,
            dropout_rate,
        }
    }

    pub fn dense(out_units: usize, dropout_rate: f64) -> Self {
        LayerSpec::Dense {
            out_units,
            dropout_rate,
        }
    }

    pub fn softmax_output() -> Self {
        LayerSpec::SoftmaxOutput {
            classes: NUM_CLASSES,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::ConvStem { .. } => "conv_stem",
            LayerSpec::ConvBlock { .. } => "conv_block",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::SoftmaxOutput { .. } => "softmax_output",
        }
    }
}

/// Input and output item shape (`c, h, w`) of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShapeTrace {
    pub input: (usize, usize, usize),
    pub output: (usize, usize, usize),
}

/// Classifier description: input geometry plus an ordered layer stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_channels: usize,
    pub input_hw: (usize, usize),
    pub layers: Vec<LayerSpec>,
}

impl ArchConfig {
    /// Stem 32, conv blocks 64/256/64, dense 300 at 100×100.
    pub fn paper_scale(input_channels: usize) -> Self {
        ArchConfig {
            input_channels,
            input_hw: (100, 100),
            layers: vec![
                LayerSpec::conv_stem(32),
                LayerSpec::conv_block(64, 0.25),
                LayerSpec::conv_block(256, 0.25),
                LayerSpec::conv_block(64, 0.25),
                LayerSpec::Flatten,
                LayerSpec::dense(300, 0.5),
                LayerSpec::softmax_output(),
            ],
        }
    }

    /// Reduced stack for single-core training: stem 8, blocks 16/32/16, dense 64 at 50×50.
    pub fn desk_scale(input_channels: usize) -> Self {
        ArchConfig {
            input_channels,
            input_hw: (50, 50),
            layers: vec![
                LayerSpec::conv_stem(8),
                LayerSpec::conv_block(16, 0.25),
                LayerSpec::conv_block(32, 0.25),
                LayerSpec::conv_block(16, 0.25),
                LayerSpec::Flatten,
                LayerSpec::dense(64, 0.5),
                LayerSpec::softmax_output(),
            ],
        }
    }

    /// Per-layer shapes; fails if the stack does not chain or does not end in a
    /// 5-class softmax.
    pub fn trace(&self) -> Result<Vec<ShapeTrace>> {
        if self.input_channels == 0 || self.input_hw.0 == 0 || self.input_hw.1 == 0 {
            return Err(Error::config(
                "input channels and spatial dims must be positive",
            ));
        }
        match self.layers.last() {
            Some(LayerSpec::SoftmaxOutput { classes }) if *classes == NUM_CLASSES => {}
            Some(LayerSpec::SoftmaxOutput { classes }) => {
                return Err(Error::config(format!(
                    "output must have {NUM_CLASSES} classes, got {classes}"
                )))
            }
            _ => return Err(Error::config("layer stack must end with a softmax output")),
        }
        let mut shape = (self.input_channels, self.input_hw.0, self.input_hw.1);
        let mut traces = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (idx, layer) in self.layers.iter().enumerate() {
            let (c, h, w) = shape;
            let out = match *layer {
                LayerSpec::ConvStem {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                } => conv_out(idx, (c, h, w), out_channels, kernel, stride, pad)?,
                LayerSpec::ConvBlock {
                    out_channels,
                    kernel,
                    pad,
                    pool,
                    dropout_rate,
                } => {
                    check_rate(idx, dropout_rate)?;
                    let (co, ho, wo) = conv_out(idx, (c, h, w), out_channels, kernel, 1, pad)?;
                    if pool == 0 || ho / pool == 0 || wo / pool == 0 {
                        return Err(Error::config(format!(
                            "layer {idx}: pooling {pool} collapses {ho}x{wo}"
                        )));
                    }
                    (co, ho / pool, wo / pool)
                }
                LayerSpec::Flatten => (c * h * w, 1, 1),
                LayerSpec::Dense {
                    out_units,
                    dropout_rate,
                } => {
                    check_rate(idx, dropout_rate)?;
                    require_flat(idx, shape)?;
                    if out_units == 0 {
                        return Err(Error::config(format!("layer {idx}: dense width is zero")));
                    }
                    (out_units, 1, 1)
                }
                LayerSpec::SoftmaxOutput { classes } => {
                    if idx != last {
                        return Err(Error::config(format!(
                            "layer {idx}: softmax output must be the final layer"
                        )));
                    }
                    require_flat(idx, shape)?;
                    (classes, 1, 1)
                }
            };
            traces.push(ShapeTrace {
                input: shape,
                output: out,
            });
            shape = out;
        }
        Ok(traces)
    }

    pub fn validate(&self) -> Result<()> {
        self.trace().map(|_| ())
    }
}

fn conv_out(
    idx: usize,
    (c, h, w): (usize, usize, usize),
    out_channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, usize)> {
    if out_channels == 0 || kernel == 0 || stride == 0 {
        return Err(Error::config(format!(
            "layer {idx}: conv hyperparameters must be positive"
        )));
    }
    if c == 0 || h + 2 * pad < kernel || w + 2 * pad < kernel {
        return Err(Error::config(format!(
            "layer {idx}: kernel {kernel} does not fit input {c}x{h}x{w} with pad {pad}"
        )));
    }
    Ok((
        out_channels,
        (h + 2 * pad - kernel) / stride + 1,
        (w + 2 * pad - kernel) / stride + 1,
    ))
}

fn require_flat(idx: usize, (c, h, w): (usize, usize, usize)) -> Result<()> {
    if h != 1 || w != 1 {
        return Err(Error::config(format!(
            "layer {idx}: dense input must be flat, got {c}x{h}x{w} (missing flatten?)"
        )));
    }
    Ok(())
}

fn check_rate(idx: usize, rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!(
            "layer {idx}: dropout rate {rate} outside [0, 1)"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_scale_chains_100_50_25_12() {
        let traces = ArchConfig::paper_scale(3).trace().unwrap();
        let spatial: Vec<usize> = traces.iter().map(|t| t.output.1).collect();
        // stem, three blocks, flatten, dense, softmax
        assert_eq!(spatial, vec![100, 50, 25, 12, 1, 1, 1]);
        assert_eq!(traces[4].output.0, 64 * 12 * 12);
        assert_eq!(traces[6].output, (5, 1, 1));
    }

    #[test]
    fn desk_scale_chains_50_25_12_6() {
        let traces = ArchConfig::desk_scale(3).trace().unwrap();
        assert_eq!(traces[1].output, (16, 25, 25));
        assert_eq!(traces[2].output, (32, 12, 12));
        assert_eq!(traces[3].output, (16, 6, 6));
        assert_eq!(traces[4].output.0, 576);
    }

    #[test]
    fn rejects_wrong_class_count() {
        let mut cfg = ArchConfig::desk_scale(3);
        *cfg.layers.last_mut().unwrap() = LayerSpec::SoftmaxOutput { classes: 4 };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_dense_without_flatten() {
        let cfg = ArchConfig {
            input_channels: 2,
            input_hw: (4, 4),
            layers: vec![LayerSpec::dense(4, 0.0), LayerSpec::softmax_output()],
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_collapsing_pool() {
        let cfg = ArchConfig {
            input_channels: 1,
            input_hw: (1, 1),
            layers: vec![
                LayerSpec::conv_block(2, 0.0),
                LayerSpec::Flatten,
                LayerSpec::softmax_output(),
            ],
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn arch_round_trips_through_json() {
        let cfg = ArchConfig::paper_scale(6);
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ArchConfig>(&text).unwrap(), cfg);
    }
}
