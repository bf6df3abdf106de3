use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::arch::{ArchConfig, LayerSpec, ShapeTrace, NUM_CLASSES};
use super::kernels::{self, BatchNormCache, ConvGeom, ConvInput};
use super::{check_finite, Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Lower bound applied to `prob[label]` before taking the log.
pub const DEFAULT_PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable weight group with its gradient and momentum buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub velocity: Vec<T>,
}

impl<T: Scalar> Param<T> {
    fn new(name: String, value: Vec<T>) -> Self {
        let n = value.len();
        Param {
            name,
            value,
            grad: vec![T::zero(); n],
            velocity: vec![T::zero(); n],
        }
    }

    fn he_uniform(name: String, len: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / fan_in as f64).sqrt();
        let value = (0..len)
            .map(|_| T::of(rng.random_range(-limit..limit)))
            .collect();
        Param::new(name, value)
    }

    fn filled(name: String, len: usize, v: f64) -> Self {
        Param::new(name, vec![T::of(v); len])
    }
}

#[derive(Clone, Debug)]
enum Kind<T> {
    Stem {
        geom: ConvGeom,
        weight: Param<T>,
        bias: Param<T>,
    },
    Block {
        geom: ConvGeom,
        pool: usize,
        rate: f64,
        weight: Param<T>,
        bias: Param<T>,
        gamma: Param<T>,
        beta: Param<T>,
        running_mean: Vec<T>,
        running_var: Vec<T>,
    },
    Flatten,
    Dense {
        inputs: usize,
        outputs: usize,
        rate: f64,
        weight: Param<T>,
        bias: Param<T>,
    },
    Output {
        inputs: usize,
        outputs: usize,
        weight: Param<T>,
        bias: Param<T>,
    },
}

#[derive(Clone, Debug)]
struct Layer<T> {
    name: String,
    trace: ShapeTrace,
    kind: Kind<T>,
}

enum Cache<T> {
    Stem {
        cols: Vec<T>,
        activated: Vec<T>,
    },
    Block {
        cols: Vec<T>,
        activated: Vec<T>,
        bn: BatchNormCache<T>,
        argmax: Vec<u32>,
        dropout: Option<Vec<T>>,
    },
    Flatten,
    Dense {
        input: Vec<T>,
        activated: Vec<T>,
        dropout: Option<Vec<T>>,
    },
    Output {
        input: Vec<T>,
    },
}

/// Weights, optimizer buffers and training bookkeeping for one [`ArchConfig`].
///
/// Eval-mode inference ([`TrainState::predict`]) borrows immutably and may run
/// from several threads at once; everything else needs `&mut self`.
#[derive(Clone)]
pub struct TrainState<T> {
    arch: ArchConfig,
    layers: Vec<Layer<T>>,
    mode: Mode,
    epoch: u64,
    dropout_rng: ChaCha8Rng,
    caches: Option<(usize, Vec<Cache<T>>)>,
    grads_ready: bool,
    track_input_grad: bool,
    input_grad: Option<Vec<T>>,
    clamp_count: u64,
}

impl<T> Clone for Cache<T>
where
    T: Clone,
{
    fn clone(&self) -> Self {
        match self {
            Cache::Stem { cols, activated } => Cache::Stem {
                cols: cols.clone(),
                activated: activated.clone(),
            },
            Cache::Block {
                cols,
                activated,
                bn,
                argmax,
                dropout,
            } => Cache::Block {
                cols: cols.clone(),
                activated: activated.clone(),
                bn: bn.clone(),
                argmax: argmax.clone(),
                dropout: dropout.clone(),
            },
            Cache::Flatten => Cache::Flatten,
            Cache::Dense {
                input,
                activated,
                dropout,
            } => Cache::Dense {
                input: input.clone(),
                activated: activated.clone(),
                dropout: dropout.clone(),
            },
            Cache::Output { input } => Cache::Output {
                input: input.clone(),
            },
        }
    }
}

/// Inverted-dropout multipliers: `0` with probability `rate`, else `1/(1-rate)`.
pub(crate) fn dropout_mask<T: Scalar>(len: usize, rate: f64, rng: &mut impl Rng) -> Vec<T> {
    let keep = T::of(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect()
}

fn apply_mask<T: Scalar>(x: &mut [T], mask: &[T]) {
    for (v, m) in x.iter_mut().zip(mask) {
        *v = *v * *m;
    }
}

impl<T: Scalar> TrainState<T> {
    /// He-uniform conv/dense weights, zero biases, unit BatchNorm gain; all from `seed`.
    pub fn new(arch: &ArchConfig, seed: u64) -> Result<Self> {
        let traces = arch.trace()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(traces.len());
        let mut block_no = 0;
        let mut dense_no = 0;
        for (idx, (spec, trace)) in arch.layers.iter().zip(&traces).enumerate() {
            let (c, h, w) = trace.input;
            let (name, kind) = match *spec {
                LayerSpec::ConvStem {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                } => {
                    let geom = ConvGeom {
                        c_in: c,
                        h,
                        w,
                        c_out: out_channels,
                        kernel,
                        stride,
                        pad,
                    };
                    let name = format!("stem{idx}");
                    let kind = Kind::Stem {
                        weight: Param::he_uniform(
                            format!("{name}.weight"),
                            geom.weight_len(),
                            geom.patch_len(),
                            &mut rng,
                        ),
                        bias: Param::filled(format!("{name}.bias"), out_channels, 0.0),
                        geom,
                    };
                    (name, kind)
                }
                LayerSpec::ConvBlock {
                    out_channels,
                    kernel,
                    pad,
                    pool,
                    dropout_rate,
                } => {
                    block_no += 1;
                    let geom = ConvGeom {
                        c_in: c,
                        h,
                        w,
                        c_out: out_channels,
                        kernel,
                        stride: 1,
                        pad,
                    };
                    let name = format!("block{block_no}");
                    let kind = Kind::Block {
                        weight: Param::he_uniform(
                            format!("{name}.weight"),
                            geom.weight_len(),
                            geom.patch_len(),
                            &mut rng,
                        ),
                        bias: Param::filled(format!("{name}.bias"), out_channels, 0.0),
                        gamma: Param::filled(format!("{name}.bn_gain"), out_channels, 1.0),
                        beta: Param::filled(format!("{name}.bn_bias"), out_channels, 0.0),
                        running_mean: vec![T::zero(); out_channels],
                        running_var: vec![T::one(); out_channels],
                        geom,
                        pool,
                        rate: dropout_rate,
                    };
                    (name, kind)
                }
                LayerSpec::Flatten => ("flatten".to_string(), Kind::Flatten),
                LayerSpec::Dense {
                    out_units,
                    dropout_rate,
                } => {
                    dense_no += 1;
                    let name = format!("dense{dense_no}");
                    let kind = Kind::Dense {
                        weight: Param::he_uniform(
                            format!("{name}.weight"),
                            out_units * c,
                            c,
                            &mut rng,
                        ),
                        bias: Param::filled(format!("{name}.bias"), out_units, 0.0),
                        inputs: c,
                        outputs: out_units,
                        rate: dropout_rate,
                    };
                    (name, kind)
                }
                LayerSpec::SoftmaxOutput { classes } => {
                    let name = "output".to_string();
                    let kind = Kind::Output {
                        weight: Param::he_uniform(
                            format!("{name}.weight"),
                            classes * c,
                            c,
                            &mut rng,
                        ),
                        bias: Param::filled(format!("{name}.bias"), classes, 0.0),
                        inputs: c,
                        outputs: classes,
                    };
                    (name, kind)
                }
            };
            layers.push(Layer {
                name,
                trace: *trace,
                kind,
            });
        }
        Ok(TrainState {
            arch: arch.clone(),
            layers,
            mode: Mode::Eval,
            epoch: 0,
            dropout_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d809_0u64),
            caches: None,
            grads_ready: false,
            track_input_grad: false,
            input_grad: None,
            clamp_count: 0,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn finish_epoch(&mut self) {
        self.epoch += 1;
    }

    /// How many times `prob[label]` had to be clamped in the loss.
    pub fn clamp_count(&self) -> u64 {
        self.clamp_count
    }

    /// Restarts the dropout stream; two forwards after the same reseed draw identical masks.
    pub fn reseed_dropout(&mut self, seed: u64) {
        self.dropout_rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// Whether backward should also produce the gradient with respect to the input.
    pub fn set_track_input_grad(&mut self, on: bool) {
        self.track_input_grad = on;
    }

    pub fn input_grad(&self) -> Option<&[T]> {
        self.input_grad.as_deref()
    }

    fn expected_input(&self, n: usize) -> Shape {
        Shape::new(
            n,
            self.arch.input_channels,
            self.arch.input_hw.0,
            self.arch.input_hw.1,
        )
    }

    /// Class probabilities (`n×5×1×1`). Train mode keeps the caches for backward.
    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.mode = mode;
        match mode {
            Mode::Eval => self.predict(input),
            Mode::Train => {
                let mut rng = self.dropout_rng.clone();
                // reuse the previous step's im2col buffers
                let mut pool: Vec<Vec<T>> = match self.caches.take() {
                    Some((_, old)) => old
                        .into_iter()
                        .filter_map(|c| match c {
                            Cache::Stem { cols, .. } | Cache::Block { cols, .. } => Some(cols),
                            _ => None,
                        })
                        .collect(),
                    None => Vec::new(),
                };
                pool.reverse();
                let mut caches = Vec::with_capacity(self.layers.len());
                let out = self.run(input, Some((&mut caches, &mut rng, &mut pool)))?;
                self.dropout_rng = rng;
                self.update_running_stats(&caches, input.shape().n);
                self.caches = Some((input.shape().n, caches));
                self.input_grad = None;
                Ok(out)
            }
        }
    }

    /// Eval-mode forward: dropout is the identity and BatchNorm uses running statistics.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(input, None)
    }

    fn run(
        &self,
        input: &Tensor<T>,
        mut train: Option<(&mut Vec<Cache<T>>, &mut ChaCha8Rng, &mut Vec<Vec<T>>)>,
    ) -> Result<Tensor<T>> {
        let n = input.shape().n;
        let want = self.expected_input(n);
        if input.shape() != want || n == 0 {
            return Err(Error::config(format!(
                "input shape {} does not match configured {}",
                input.shape(),
                want
            )));
        }
        check_finite(input.values(), "input")?;
        let mut x = input.values().to_vec();
        for layer in &self.layers {
            let (c_out, h_out, w_out) = layer.trace.output;
            x = match &layer.kind {
                Kind::Stem { geom, weight, bias } => {
                    let mut y = vec![T::zero(); n * geom.out_len()];
                    let mut cols = train.as_mut().and_then(|t| t.2.pop()).unwrap_or_default();
                    kernels::conv2d_forward_keep(
                        geom,
                        n,
                        &x,
                        &weight.value,
                        &bias.value,
                        &mut y,
                        train.is_some().then_some(&mut cols),
                    );
                    kernels::relu_inplace(&mut y);
                    if let Some((caches, ..)) = train.as_mut() {
                        caches.push(Cache::Stem {
                            cols,
                            activated: y.clone(),
                        });
                    }
                    y
                }
                Kind::Block {
                    geom,
                    pool,
                    rate,
                    weight,
                    bias,
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    let mut a = vec![T::zero(); n * geom.out_len()];
                    let mut cols = train.as_mut().and_then(|t| t.2.pop()).unwrap_or_default();
                    kernels::conv2d_forward_keep(
                        geom,
                        n,
                        &x,
                        &weight.value,
                        &bias.value,
                        &mut a,
                        train.is_some().then_some(&mut cols),
                    );
                    kernels::relu_inplace(&mut a);
                    let plane = geom.h_out() * geom.w_out();
                    let mut normed = vec![T::zero(); a.len()];
                    let bn = match train.as_ref() {
                        Some(_) => Some(kernels::batchnorm_train_forward(
                            &a,
                            n,
                            geom.c_out,
                            plane,
                            &gamma.value,
                            &beta.value,
                            &mut normed,
                        )),
                        None => {
                            kernels::batchnorm_eval_forward(
                                &a,
                                n,
                                geom.c_out,
                                plane,
                                &gamma.value,
                                &beta.value,
                                running_mean,
                                running_var,
                                &mut normed,
                            );
                            None
                        }
                    };
                    let (mut pooled, argmax) = kernels::maxpool_forward(
                        &normed,
                        n * geom.c_out,
                        geom.h_out(),
                        geom.w_out(),
                        *pool,
                    );
                    if let Some((caches, rng, _)) = train.as_mut() {
                        let dropout =
                            (*rate > 0.0).then(|| dropout_mask(pooled.len(), *rate, *rng));
                        if let Some(mask) = &dropout {
                            apply_mask(&mut pooled, mask);
                        }
                        caches.push(Cache::Block {
                            cols,
                            activated: a,
                            bn: bn.expect("train mode computes batch statistics"),
                            argmax,
                            dropout,
                        });
                    }
                    pooled
                }
                Kind::Flatten => {
                    if let Some((caches, ..)) = train.as_mut() {
                        caches.push(Cache::Flatten);
                    }
                    x
                }
                Kind::Dense {
                    inputs,
                    outputs,
                    rate,
                    weight,
                    bias,
                } => {
                    let mut y = kernels::dense_forward(
                        &x,
                        n,
                        *inputs,
                        *outputs,
                        &weight.value,
                        &bias.value,
                    );
                    kernels::relu_inplace(&mut y);
                    if let Some((caches, rng, _)) = train.as_mut() {
                        let activated = y.clone();
                        let dropout = (*rate > 0.0).then(|| dropout_mask(y.len(), *rate, *rng));
                        if let Some(mask) = &dropout {
                            apply_mask(&mut y, mask);
                        }
                        caches.push(Cache::Dense {
                            input: x,
                            activated,
                            dropout,
                        });
                    }
                    y
                }
                Kind::Output {
                    inputs,
                    outputs,
                    weight,
                    bias,
                } => {
                    let logits = kernels::dense_forward(
                        &x,
                        n,
                        *inputs,
                        *outputs,
                        &weight.value,
                        &bias.value,
                    );
                    check_finite(&logits, &layer.name)?;
                    if let Some((caches, ..)) = train.as_mut() {
                        caches.push(Cache::Output { input: x });
                    }
                    kernels::softmax_rows(&logits, *outputs)
                }
            };
            check_finite(&x, &layer.name)?;
            debug_assert_eq!(x.len(), n * c_out * h_out * w_out);
        }
        Tensor::from_vec(Shape::new(n, NUM_CLASSES, 1, 1), x)
    }

    fn update_running_stats(&mut self, caches: &[Cache<T>], n: usize) {
        let momentum = T::of(kernels::BN_MOMENTUM);
        for (layer, cache) in self.layers.iter_mut().zip(caches) {
            if let (
                Kind::Block {
                    geom,
                    running_mean,
                    running_var,
                    ..
                },
                Cache::Block { bn, .. },
            ) = (&mut layer.kind, cache)
            {
                let m = (n * geom.h_out() * geom.w_out()) as f64;
                let unbias = T::of(if m > 1.0 { m / (m - 1.0) } else { 1.0 });
                for ch in 0..geom.c_out {
                    running_mean[ch] =
                        (T::one() - momentum) * running_mean[ch] + momentum * bn.mean[ch];
                    running_var[ch] =
                        (T::one() - momentum) * running_var[ch] + momentum * bn.var[ch] * unbias;
                }
            }
        }
    }

    /// Mean cross-entropy of `probs` against `labels`; populates every weight gradient.
    pub fn loss_and_backward(&mut self, probs: &Tensor<T>, labels: &[usize]) -> Result<T> {
        let (n, caches) = self.caches.take().ok_or_else(|| {
            Error::State("loss_and_backward needs a train-mode forward first".into())
        })?;
        let result = self.backward_from(n, &caches, probs, labels);
        self.caches = Some((n, caches));
        result
    }

    fn backward_from(
        &mut self,
        n: usize,
        caches: &[Cache<T>],
        probs: &Tensor<T>,
        labels: &[usize],
    ) -> Result<T> {
        if probs.shape() != Shape::new(n, NUM_CLASSES, 1, 1) || labels.len() != n {
            return Err(Error::config(format!(
                "probabilities {} / {} labels do not match the cached batch of {n}",
                probs.shape(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
            return Err(Error::data(format!("label {bad} outside 0..{NUM_CLASSES}")));
        }
        let floor = T::of(DEFAULT_PROB_FLOOR);
        let inv_n = T::one() / T::of(n as f64);
        let mut loss = T::zero();
        let mut grad = probs.values().to_vec();
        for (i, &label) in labels.iter().enumerate() {
            let p = probs.values()[i * NUM_CLASSES + label];
            let p = if p < floor {
                self.clamp_count += 1;
                floor
            } else {
                p
            };
            loss = loss - p.ln();
            grad[i * NUM_CLASSES + label] = grad[i * NUM_CLASSES + label] - T::one();
        }
        for g in grad.iter_mut() {
            *g = *g * inv_n;
        }
        let track_input = self.track_input_grad;
        let last = self.layers.len();
        for (idx, (layer, cache)) in self.layers.iter_mut().zip(caches).enumerate().rev() {
            let need_dx = idx > 0 || track_input;
            grad = match (&mut layer.kind, cache) {
                (
                    Kind::Output {
                        inputs,
                        outputs,
                        weight,
                        bias,
                    },
                    Cache::Output { input },
                ) => kernels::dense_backward(
                    input,
                    &grad,
                    n,
                    *inputs,
                    *outputs,
                    &weight.value,
                    &mut weight.grad,
                    &mut bias.grad,
                ),
                (
                    Kind::Dense {
                        inputs,
                        outputs,
                        weight,
                        bias,
                        ..
                    },
                    Cache::Dense {
                        input,
                        activated,
                        dropout,
                    },
                ) => {
                    if let Some(mask) = dropout {
                        apply_mask(&mut grad, mask);
                    }
                    kernels::relu_backward_inplace(activated, &mut grad);
                    kernels::dense_backward(
                        input,
                        &grad,
                        n,
                        *inputs,
                        *outputs,
                        &weight.value,
                        &mut weight.grad,
                        &mut bias.grad,
                    )
                }
                (Kind::Flatten, Cache::Flatten) => grad,
                (
                    Kind::Block {
                        geom,
                        weight,
                        bias,
                        gamma,
                        beta,
                        ..
                    },
                    Cache::Block {
                        cols,
                        activated,
                        bn,
                        argmax,
                        dropout,
                    },
                ) => {
                    if let Some(mask) = dropout {
                        apply_mask(&mut grad, mask);
                    }
                    let plane = geom.h_out() * geom.w_out();
                    let mut d_normed = vec![T::zero(); activated.len()];
                    kernels::maxpool_backward(&grad, argmax, &mut d_normed);
                    let mut d_act = vec![T::zero(); activated.len()];
                    kernels::batchnorm_backward(
                        bn,
                        &d_normed,
                        n,
                        geom.c_out,
                        plane,
                        &gamma.value,
                        &mut gamma.grad,
                        &mut beta.grad,
                        &mut d_act,
                    );
                    kernels::relu_backward_inplace(activated, &mut d_act);
                    let mut dx = vec![T::zero(); if need_dx { n * geom.in_len() } else { 0 }];
                    kernels::conv2d_backward_cols(
                        geom,
                        n,
                        ConvInput::Cols(cols),
                        &weight.value,
                        &d_act,
                        &mut weight.grad,
                        &mut bias.grad,
                        need_dx.then_some(dx.as_mut_slice()),
                    );
                    dx
                }
                (Kind::Stem { geom, weight, bias }, Cache::Stem { cols, activated }) => {
                    kernels::relu_backward_inplace(activated, &mut grad);
                    let mut dx = vec![T::zero(); if need_dx { n * geom.in_len() } else { 0 }];
                    kernels::conv2d_backward_cols(
                        geom,
                        n,
                        ConvInput::Cols(cols),
                        &weight.value,
                        &grad,
                        &mut weight.grad,
                        &mut bias.grad,
                        need_dx.then_some(dx.as_mut_slice()),
                    );
                    dx
                }
                _ => {
                    return Err(Error::State(format!(
                        "cache/layer mismatch at layer {idx} of {last}"
                    )))
                }
            };
        }
        for p in self.params() {
            check_finite(&p.grad, &p.name)?;
        }
        self.input_grad = track_input.then_some(grad);
        self.grads_ready = true;
        Ok(loss * inv_n)
    }

    /// Momentum SGD: `v ← momentum·v + g; w ← w − lr·v`, then gradients are zeroed.
    pub fn sgd_step(&mut self, lr: f64, momentum: f64) -> Result<()> {
        if !self.grads_ready {
            return Err(Error::State(
                "sgd_step called before loss_and_backward".into(),
            ));
        }
        if !(lr >= 0.0 && lr.is_finite()) || !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!(
                "invalid lr {lr} / momentum {momentum}"
            )));
        }
        let (lr, mu) = (T::of(lr), T::of(momentum));
        for p in self.params_mut() {
            for ((w, g), v) in p
                .value
                .iter_mut()
                .zip(p.grad.iter_mut())
                .zip(p.velocity.iter_mut())
            {
                *v = mu * *v + *g;
                *w = *w - lr * *v;
                *g = T::zero();
            }
            check_finite(&p.value, &p.name)?;
        }
        self.grads_ready = false;
        Ok(())
    }

    /// Trainable weight groups in declaration order.
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match &layer.kind {
                Kind::Stem { weight, bias, .. }
                | Kind::Dense { weight, bias, .. }
                | Kind::Output { weight, bias, .. } => out.extend([weight, bias]),
                Kind::Block {
                    weight,
                    bias,
                    gamma,
                    beta,
                    ..
                } => out.extend([weight, bias, gamma, beta]),
                Kind::Flatten => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match &mut layer.kind {
                Kind::Stem { weight, bias, .. }
                | Kind::Dense { weight, bias, .. }
                | Kind::Output { weight, bias, .. } => out.extend([weight, bias]),
                Kind::Block {
                    weight,
                    bias,
                    gamma,
                    beta,
                    ..
                } => out.extend([weight, bias, gamma, beta]),
                Kind::Flatten => {}
            }
        }
        out
    }

    /// Every stored array in file order: conv kernel, bias; BatchNorm gain, bias,
    /// running mean, running var; dense matrix, bias.
    pub fn weight_arrays(&self) -> Vec<(&str, &[T])> {
        let mut out: Vec<(&str, &[T])> = Vec::new();
        for layer in &self.layers {
            match &layer.kind {
                Kind::Stem { weight, bias, .. }
                | Kind::Dense { weight, bias, .. }
                | Kind::Output { weight, bias, .. } => {
                    out.push((&weight.name, &weight.value));
                    out.push((&bias.name, &bias.value));
                }
                Kind::Block {
                    weight,
                    bias,
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    ..
                } => {
                    out.push((&weight.name, &weight.value));
                    out.push((&bias.name, &bias.value));
                    out.push((&gamma.name, &gamma.value));
                    out.push((&beta.name, &beta.value));
                    out.push(("running_mean", running_mean));
                    out.push(("running_var", running_var));
                }
                Kind::Flatten => {}
            }
        }
        out
    }

    pub fn weight_arrays_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match &mut layer.kind {
                Kind::Stem { weight, bias, .. }
                | Kind::Dense { weight, bias, .. }
                | Kind::Output { weight, bias, .. } => {
                    out.push(&mut weight.value);
                    out.push(&mut bias.value);
                }
                Kind::Block {
                    weight,
                    bias,
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    ..
                } => {
                    out.push(&mut weight.value);
                    out.push(&mut bias.value);
                    out.push(&mut gamma.value);
                    out.push(&mut beta.value);
                    out.push(running_mean);
                    out.push(running_var);
                }
                Kind::Flatten => {}
            }
        }
        out
    }

    /// Hash of every ReLU on/off decision, pooling argmax and dropout mask of the
    /// last train-mode forward. Two forwards with equal signatures are on the
    /// same smooth piece of the loss surface.
    pub fn activation_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        if let Some((_, caches)) = &self.caches {
            for cache in caches {
                match cache {
                    Cache::Stem { activated, .. } => hash_active(activated, &mut h),
                    Cache::Block {
                        activated,
                        argmax,
                        dropout,
                        ..
                    } => {
                        hash_active(activated, &mut h);
                        argmax.hash(&mut h);
                        if let Some(m) = dropout {
                            hash_active(m, &mut h);
                        }
                    }
                    Cache::Dense {
                        activated, dropout, ..
                    } => {
                        hash_active(activated, &mut h);
                        if let Some(m) = dropout {
                            hash_active(m, &mut h);
                        }
                    }
                    Cache::Flatten | Cache::Output { .. } => {}
                }
            }
        }
        h.finish()
    }

    /// Converts the state to another scalar type (used to gradient-check in `f64`).
    pub fn cast<U: Scalar>(&self) -> TrainState<U> {
        let cast_vec = |v: &[T]| {
            v.iter()
                .map(|x| U::of(x.to_f64().unwrap_or(f64::NAN)))
                .collect::<Vec<U>>()
        };
        let cast_param = |p: &Param<T>| Param {
            name: p.name.clone(),
            value: cast_vec(&p.value),
            grad: cast_vec(&p.grad),
            velocity: cast_vec(&p.velocity),
        };
        let layers = self
            .layers
            .iter()
            .map(|l| Layer {
                name: l.name.clone(),
                trace: l.trace,
                kind: match &l.kind {
                    Kind::Stem { geom, weight, bias } => Kind::Stem {
                        geom: *geom,
                        weight: cast_param(weight),
                        bias: cast_param(bias),
                    },
                    Kind::Block {
                        geom,
                        pool,
                        rate,
                        weight,
                        bias,
                        gamma,
                        beta,
                        running_mean,
                        running_var,
                    } => Kind::Block {
                        geom: *geom,
                        pool: *pool,
                        rate: *rate,
                        weight: cast_param(weight),
                        bias: cast_param(bias),
                        gamma: cast_param(gamma),
                        beta: cast_param(beta),
                        running_mean: cast_vec(running_mean),
                        running_var: cast_vec(running_var),
                    },
                    Kind::Flatten => Kind::Flatten,
                    Kind::Dense {
                        inputs,
                        outputs,
                        rate,
                        weight,
                        bias,
                    } => Kind::Dense {
                        inputs: *inputs,
                        outputs: *outputs,
                        rate: *rate,
                        weight: cast_param(weight),
                        bias: cast_param(bias),
                    },
                    Kind::Output {
                        inputs,
                        outputs,
                        weight,
                        bias,
                    } => Kind::Output {
                        inputs: *inputs,
                        outputs: *outputs,
                        weight: cast_param(weight),
                        bias: cast_param(bias),
                    },
                },
            })
            .collect();
        TrainState {
            arch: self.arch.clone(),
            layers,
            mode: self.mode,
            epoch: self.epoch,
            dropout_rng: self.dropout_rng.clone(),
            caches: None,
            grads_ready: false,
            track_input_grad: self.track_input_grad,
            input_grad: None,
            clamp_count: self.clamp_count,
        }
    }
}

fn hash_active<T: Scalar>(v: &[T], h: &mut DefaultHasher) {
    let mut word = 0u64;
    for (i, x) in v.iter().enumerate() {
        if *x > T::zero() {
            word |= 1 << (i % 64);
        }
        if i % 64 == 63 {
            word.hash(h);
            word = 0;
        }
    }
    word.hash(h);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::LayerSpec;
    use proptest::prelude::*;

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            input_channels: 2,
            input_hw: (6, 6),
            layers: vec![
                LayerSpec::conv_stem(3),
                LayerSpec::conv_block(4, 0.25),
                LayerSpec::Flatten,
                LayerSpec::dense(6, 0.5),
                LayerSpec::softmax_output(),
            ],
        }
    }

    fn input(n: usize, arch: &ArchConfig, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = Shape::new(n, arch.input_channels, arch.input_hw.0, arch.input_hw.1);
        Tensor::from_vec(
            shape,
            (0..shape.len())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn paper_scale_forward_yields_one_by_five() {
        let arch = ArchConfig::paper_scale(3);
        let state = TrainState::<f32>::new(&arch, 1).unwrap();
        let x = Tensor::zeros(Shape::new(1, 3, 100, 100));
        let probs = state.predict(&x).unwrap();
        assert_eq!(probs.shape(), Shape::new(1, 5, 1, 1));
        assert!((probs.values().iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn wrong_input_shape_is_a_config_error() {
        let arch = tiny_arch();
        let state = TrainState::<f64>::new(&arch, 0).unwrap();
        let bad = Tensor::zeros(Shape::new(1, 3, 6, 6));
        assert!(matches!(state.predict(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_input_is_a_numeric_error() {
        let arch = tiny_arch();
        let state = TrainState::<f64>::new(&arch, 0).unwrap();
        let mut x = input(1, &arch, 3);
        x.values_mut()[5] = f64::NAN;
        assert!(matches!(state.predict(&x), Err(Error::Numeric { .. })));
    }

    #[test]
    fn uniform_probs_give_ln5_loss() {
        // zero output weights make the logits all zero
        let arch = tiny_arch();
        let mut state = TrainState::<f64>::new(&arch, 2).unwrap();
        for p in state.params_mut() {
            if p.name.starts_with("output") {
                p.value.fill(0.0);
            }
        }
        let x = input(4, &arch, 1);
        let probs = state.forward(&x, Mode::Train).unwrap();
        assert!(probs.values().iter().all(|p| (p - 0.2).abs() < 1e-12));
        let loss = state.loss_and_backward(&probs, &[0, 1, 2, 4]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_gives_zero_loss_and_zero_logit_grad() {
        let arch = ArchConfig {
            input_channels: 3,
            input_hw: (1, 1),
            layers: vec![LayerSpec::Flatten, LayerSpec::softmax_output()],
        };
        let mut state = TrainState::<f64>::new(&arch, 0).unwrap();
        let x = input(2, &arch, 0);
        state.forward(&x, Mode::Train).unwrap();
        let mut onehot = vec![0.0; 10];
        onehot[3] = 1.0;
        onehot[5] = 1.0;
        let probs = Tensor::from_vec(Shape::new(2, 5, 1, 1), onehot).unwrap();
        let loss = state.loss_and_backward(&probs, &[3, 0]).unwrap();
        assert_eq!(loss, 0.0);
        for p in state.params() {
            assert!(p.grad.iter().all(|g| *g == 0.0), "{}", p.name);
        }
    }

    #[test]
    fn zero_probability_is_clamped_and_counted() {
        let arch = ArchConfig {
            input_channels: 3,
            input_hw: (1, 1),
            layers: vec![LayerSpec::Flatten, LayerSpec::softmax_output()],
        };
        let mut state = TrainState::<f64>::new(&arch, 0).unwrap();
        state.forward(&input(1, &arch, 0), Mode::Train).unwrap();
        let probs =
            Tensor::from_vec(Shape::new(1, 5, 1, 1), vec![1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let loss = state.loss_and_backward(&probs, &[2]).unwrap();
        assert!((loss + (1e-12f64).ln()).abs() < 1e-9);
        assert_eq!(state.clamp_count(), 1);
    }

    #[test]
    fn out_of_range_label_is_a_data_error() {
        let arch = tiny_arch();
        let mut state = TrainState::<f64>::new(&arch, 0).unwrap();
        let probs = state.forward(&input(1, &arch, 0), Mode::Train).unwrap();
        assert!(matches!(
            state.loss_and_backward(&probs, &[5]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn backward_without_forward_is_a_state_error() {
        let arch = tiny_arch();
        let mut state = TrainState::<f64>::new(&arch, 0).unwrap();
        let probs = Tensor::zeros(Shape::new(1, 5, 1, 1));
        assert!(matches!(
            state.loss_and_backward(&probs, &[0]),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn sgd_before_backward_is_a_state_error() {
        let mut state = TrainState::<f64>::new(&tiny_arch(), 0).unwrap();
        assert!(matches!(state.sgd_step(0.1, 0.0), Err(Error::State(_))));
    }

    #[test]
    fn sgd_arithmetic() {
        let arch = ArchConfig {
            input_channels: 1,
            input_hw: (1, 1),
            layers: vec![LayerSpec::Flatten, LayerSpec::softmax_output()],
        };
        let mut state = TrainState::<f64>::new(&arch, 0).unwrap();
        // momentum 0: 1.0 - 0.1·0.5
        state.forward(&input(1, &arch, 0), Mode::Train).unwrap();
        state.grads_ready = true;
        for p in state.params_mut() {
            p.value.fill(1.0);
            p.grad.fill(0.5);
        }
        state.sgd_step(0.1, 0.0).unwrap();
        for p in state.params() {
            assert!(p.value.iter().all(|w| (w - 0.95).abs() < 1e-15));
            assert!(p.grad.iter().all(|g| *g == 0.0));
        }
        // zero gradient leaves weights alone
        state.grads_ready = true;
        let before: Vec<Vec<f64>> = state.params().iter().map(|p| p.value.clone()).collect();
        for p in state.params_mut() {
            p.velocity.fill(0.0);
        }
        state.sgd_step(0.1, 0.0).unwrap();
        let after: Vec<Vec<f64>> = state.params().iter().map(|p| p.value.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn momentum_unrolls_to_minus_2_9_g() {
        let arch = ArchConfig {
            input_channels: 1,
            input_hw: (1, 1),
            layers: vec![LayerSpec::Flatten, LayerSpec::softmax_output()],
        };
        let mut state = TrainState::<f64>::new(&arch, 0).unwrap();
        let g = 0.37;
        for p in state.params_mut() {
            p.value.fill(0.0);
        }
        for _ in 0..2 {
            state.grads_ready = true;
            for p in state.params_mut() {
                p.grad.fill(g);
            }
            state.sgd_step(1.0, 0.9).unwrap();
        }
        for p in state.params() {
            assert!(p.value.iter().all(|w| (w + 2.9 * g).abs() < 1e-12));
        }
    }

    #[test]
    fn eval_forward_is_bit_identical() {
        let arch = tiny_arch();
        let mut state = TrainState::<f32>::new(&arch, 9).unwrap();
        let x64 = input(3, &arch, 4);
        let x = Tensor::from_vec(
            x64.shape(),
            x64.values().iter().map(|v| *v as f32).collect(),
        )
        .unwrap();
        // move running stats off their init values first
        state.forward(&x, Mode::Train).unwrap();
        let a = state.forward(&x, Mode::Eval).unwrap();
        let b = state.predict(&x).unwrap();
        assert_eq!(
            a.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn dropout_rate_and_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for rate in [0.25, 0.5] {
            let mask: Vec<f64> = dropout_mask(10_000, rate, &mut rng);
            let zeroed = mask.iter().filter(|m| **m == 0.0).count() as f64 / 10_000.0;
            assert!((zeroed - rate).abs() < 0.02, "rate {rate}: zeroed {zeroed}");
            assert!(mask
                .iter()
                .filter(|m| **m != 0.0)
                .all(|m| (m - 1.0 / (1.0 - rate)).abs() < 1e-12));
        }
    }

    #[test]
    fn eval_dropout_is_identity() {
        let arch = ArchConfig {
            input_channels: 4,
            input_hw: (1, 1),
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::dense(8, 0.9),
                LayerSpec::softmax_output(),
            ],
        };
        let mut with_dropout = TrainState::<f64>::new(&arch, 5).unwrap();
        let mut no_dropout_arch = arch.clone();
        no_dropout_arch.layers[1] = LayerSpec::dense(8, 0.0);
        let mut without = TrainState::<f64>::new(&no_dropout_arch, 5).unwrap();
        let x = input(2, &arch, 8);
        assert_eq!(
            with_dropout.forward(&x, Mode::Eval).unwrap(),
            without.forward(&x, Mode::Eval).unwrap()
        );
    }

    #[test]
    fn batchnorm_normalizes_per_channel() {
        let (n, c, plane) = (8, 3, 25);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x: Vec<f64> = (0..n * c * plane)
            .map(|i| rng.random_range(-2.0..5.0) * (1 + i % 3) as f64)
            .collect();
        let mut out = vec![0.0; x.len()];
        kernels::batchnorm_train_forward(&x, n, c, plane, &[1.0; 3], &[0.0; 3], &mut out);
        for ch in 0..c {
            let vals: Vec<f64> = (0..n)
                .flat_map(|i| out[(i * c + ch) * plane..(i * c + ch + 1) * plane].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn cast_preserves_forward() {
        let arch = tiny_arch();
        let state = TrainState::<f64>::new(&arch, 3).unwrap();
        let back: TrainState<f64> = state.cast::<f64>();
        let x = input(2, &arch, 1);
        assert_eq!(state.predict(&x).unwrap(), back.predict(&x).unwrap());
    }

    #[test]
    fn frozen_state_is_shareable_for_inference() {
        let arch = tiny_arch();
        let state = TrainState::<f32>::new(&arch, 3).unwrap();
        let x = Tensor::from_vec(Shape::new(1, 2, 6, 6), vec![0.5f32; 72]).unwrap();
        let expected = state.predict(&x).unwrap();
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..3)
                .map(|_| s.spawn(|| state.predict(&x).unwrap()))
                .collect();
            for h in handles {
                assert_eq!(h.join().unwrap(), expected);
            }
        });
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn softmax_rows_are_distributions(logits in proptest::collection::vec(-50.0f64..50.0, 5)) {
            let p = kernels::softmax_rows(&logits, 5);
            prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
