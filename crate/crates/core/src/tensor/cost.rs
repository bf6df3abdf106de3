use serde::Serialize;

use super::arch::{ArchConfig, LayerSpec};
use crate::error::Result;

/// Counting rules used by [`count_costs`].
pub const FLOPS_CONVENTION: &str = "1 multiply-accumulate = 2 FLOPs; bias adds, ReLU, BatchNorm, \
max-pooling, dropout and softmax are counted as 0";

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub params: u64,
    pub flops: u64,
    pub per_layer: Vec<LayerCost>,
    pub convention: String,
}

/// Closed-form parameter and FLOP counts. BatchNorm running statistics are
/// state, not parameters.
pub fn count_costs(cfg: &ArchConfig) -> Result<CostReport> {
    let traces = cfg.trace()?;
    let mut per_layer = Vec::new();
    let mut block_no = 0;
    let mut dense_no = 0;
    for (idx, (spec, trace)) in cfg.layers.iter().zip(&traces).enumerate() {
        let c_in = trace.input.0 as u64;
        match *spec {
            LayerSpec::ConvStem { kernel, .. } => {
                let (co, ho, wo) = trace.output;
                per_layer.push(conv_cost(
                    format!("stem{idx}.conv"),
                    kernel,
                    c_in,
                    co as u64,
                    (ho * wo) as u64,
                ));
            }
            LayerSpec::ConvBlock {
                out_channels,
                kernel,
                ..
            } => {
                block_no += 1;
                // conv output is pre-pool: input spatial dims under same padding
                let (_, h, w) = trace.input;
                let (ho, wo) = conv_hw(spec, h, w);
                per_layer.push(conv_cost(
                    format!("block{block_no}.conv"),
                    kernel,
                    c_in,
                    out_channels as u64,
                    (ho * wo) as u64,
                ));
                per_layer.push(LayerCost {
                    name: format!("block{block_no}.bn"),
                    params: 2 * out_channels as u64,
                    flops: 0,
                });
            }
            LayerSpec::Flatten => {}
            LayerSpec::Dense { out_units, .. } => {
                dense_no += 1;
                per_layer.push(dense_cost(
                    format!("dense{dense_no}"),
                    c_in,
                    out_units as u64,
                ));
            }
            LayerSpec::SoftmaxOutput { classes } => {
                per_layer.push(dense_cost("output".to_string(), c_in, classes as u64));
            }
        }
    }
    Ok(CostReport {
        params: per_layer.iter().map(|l| l.params).sum(),
        flops: per_layer.iter().map(|l| l.flops).sum(),
        per_layer,
        convention: FLOPS_CONVENTION.to_string(),
    })
}

fn conv_hw(spec: &LayerSpec, h: usize, w: usize) -> (usize, usize) {
    match *spec {
        LayerSpec::ConvStem {
            kernel,
            stride,
            pad,
            ..
        } => (
            (h + 2 * pad - kernel) / stride + 1,
            (w + 2 * pad - kernel) / stride + 1,
        ),
        LayerSpec::ConvBlock { kernel, pad, .. } => {
            (h + 2 * pad - kernel + 1, w + 2 * pad - kernel + 1)
        }
        _ => (h, w),
    }
}

fn conv_cost(name: String, kernel: usize, c_in: u64, c_out: u64, out_plane: u64) -> LayerCost {
    let k2 = (kernel * kernel) as u64;
    LayerCost {
        name,
        params: k2 * c_in * c_out + c_out,
        flops: 2 * k2 * c_in * c_out * out_plane,
    }
}

fn dense_cost(name: String, inputs: u64, outputs: u64) -> LayerCost {
    LayerCost {
        name,
        params: inputs * outputs + outputs,
        flops: 2 * inputs * outputs,
    }
}
