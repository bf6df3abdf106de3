//! Central-difference verification of the analytic backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::arch::{ArchConfig, NUM_CLASSES};
use super::net::{Mode, TrainState};
use super::{Shape, Tensor};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub batch: usize,
    pub eps: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            batch: 1,
            eps: 1e-5,
        }
    }
}

/// Worst relative error within one weight group (or the input).
#[derive(Clone, Debug)]
pub struct GroupError {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose ±eps perturbation flipped a ReLU, pooling argmax or
    /// dropout decision; the loss is not differentiable there.
    pub skipped: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_error)
            .fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for g in &self.groups {
            writeln!(
                f,
                "{:<20} max_rel={:.3e} checked={} skipped={}",
                g.name, g.max_rel_error, g.checked, g.skipped
            )?;
        }
        Ok(())
    }
}

pub fn gradient_check(cfg: &ArchConfig, seed: u64) -> Result<GradCheckReport> {
    gradient_check_with(cfg, seed, GradCheckOptions::default())
}

/// Compares analytic gradients of the mean cross-entropy against central
/// differences in double precision, for every weight group and the input.
/// Train-mode forward is used, so BatchNorm batch statistics are part of the
/// checked function; dropout masks are held fixed by reseeding.
pub fn gradient_check_with(
    cfg: &ArchConfig,
    seed: u64,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut state = TrainState::<f64>::new(cfg, seed)?;
    state.set_track_input_grad(true);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9));
    let shape = Shape::new(
        opts.batch,
        cfg.input_channels,
        cfg.input_hw.0,
        cfg.input_hw.1,
    );
    let mut input = Tensor::from_vec(
        shape,
        (0..shape.len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )?;
    let labels: Vec<usize> = (0..opts.batch)
        .map(|_| rng.random_range(0..NUM_CLASSES))
        .collect();
    let dropout_seed = seed ^ 0xd0_d0;

    state.reseed_dropout(dropout_seed);
    let probs = state.forward(&input, Mode::Train)?;
    state.loss_and_backward(&probs, &labels)?;
    let base_sig = state.activation_signature();
    let analytic: Vec<(String, Vec<f64>)> = state
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.grad.clone()))
        .collect();
    let input_grad = state.input_grad().expect("input gradient tracked").to_vec();

    let probe = |state: &mut TrainState<f64>, input: &Tensor<f64>| -> Result<(f64, u64)> {
        state.reseed_dropout(dropout_seed);
        let probs = state.forward(input, Mode::Train)?;
        Ok((cross_entropy(&probs, &labels), state.activation_signature()))
    };

    let mut groups = Vec::new();
    for (g, (name, grads)) in analytic.iter().enumerate() {
        let mut acc = Accum::new(name);
        for j in 0..grads.len() {
            let orig = state.params()[g].value[j];
            state.params_mut()[g].value[j] = orig + opts.eps;
            let (plus, sig_p) = probe(&mut state, &input)?;
            state.params_mut()[g].value[j] = orig - opts.eps;
            let (minus, sig_m) = probe(&mut state, &input)?;
            state.params_mut()[g].value[j] = orig;
            acc.push(
                grads[j],
                (plus - minus) / (2.0 * opts.eps),
                sig_p == base_sig && sig_m == base_sig,
            );
        }
        groups.push(acc.finish());
    }
    let mut acc = Accum::new("input");
    for j in 0..input_grad.len() {
        let orig = input.values()[j];
        input.values_mut()[j] = orig + opts.eps;
        let (plus, sig_p) = probe(&mut state, &input)?;
        input.values_mut()[j] = orig - opts.eps;
        let (minus, sig_m) = probe(&mut state, &input)?;
        input.values_mut()[j] = orig;
        acc.push(
            input_grad[j],
            (plus - minus) / (2.0 * opts.eps),
            sig_p == base_sig && sig_m == base_sig,
        );
    }
    groups.push(acc.finish());
    Ok(GradCheckReport { groups })
}

fn cross_entropy(probs: &Tensor<f64>, labels: &[usize]) -> f64 {
    let n = labels.len() as f64;
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            -probs.values()[i * NUM_CLASSES + l]
                .max(super::DEFAULT_PROB_FLOOR)
                .ln()
        })
        .sum::<f64>()
        / n
}

struct Accum {
    group: GroupError,
}

impl Accum {
    fn new(name: &str) -> Self {
        Accum {
            group: GroupError {
                name: name.to_string(),
                max_rel_error: 0.0,
                checked: 0,
                skipped: 0,
            },
        }
    }

    fn push(&mut self, analytic: f64, numeric: f64, smooth: bool) {
        if !smooth {
            self.group.skipped += 1;
            return;
        }
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic - numeric).abs() / denom;
        self.group.max_rel_error = self.group.max_rel_error.max(rel);
        self.group.checked += 1;
    }

    fn finish(self) -> GroupError {
        self.group
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::LayerSpec;

    #[test]
    fn dense_on_flat_input() {
        let cfg = ArchConfig {
            input_channels: 8,
            input_hw: (1, 1),
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::dense(4, 0.0),
                LayerSpec::softmax_output(),
            ],
        };
        let report = gradient_check(&cfg, 3).unwrap();
        assert!(report.max_rel_error() < 1e-6, "{report}");
    }

    #[test]
    fn conv_block_with_batch_stats() {
        let cfg = ArchConfig {
            input_channels: 2,
            input_hw: (6, 6),
            layers: vec![
                LayerSpec::conv_block(8, 0.0),
                LayerSpec::Flatten,
                LayerSpec::softmax_output(),
            ],
        };
        let report = gradient_check(&cfg, 5).unwrap();
        assert!(report.max_rel_error() < 1e-4, "{report}");
        assert!(report.groups.iter().all(|g| g.checked > 0));
    }

    #[test]
    fn dropout_masks_are_held_fixed() {
        let cfg = ArchConfig {
            input_channels: 6,
            input_hw: (1, 1),
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::dense(10, 0.5),
                LayerSpec::softmax_output(),
            ],
        };
        let report = gradient_check(&cfg, 8).unwrap();
        assert!(report.max_rel_error() < 1e-4, "{report}");
    }
}
