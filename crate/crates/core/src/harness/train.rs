use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::{check_compatible, model_predictions, Metrics, Predictor, TrainedModel};
use crate::error::{Error, Result};
use crate::models::{assemble_batch, build_config, Scale, Variant};
use crate::scene::{read_dataset, Dataset, Sample, SplitName};
use crate::tensor::{write_model, Mode, Shape, Tensor, TrainState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub variant: Variant,
    pub scale: Scale,
    pub dataset: PathBuf,
}

impl TrainConfig {
    pub fn new(
        dataset: impl Into<PathBuf>,
        variant: Variant,
        scale: Scale,
        epochs: usize,
        seed: u64,
    ) -> Self {
        TrainConfig {
            epochs,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            seed,
            variant,
            scale,
            dataset: dataset.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::usage("epochs and batch size must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::usage(format!(
                "lr {} / momentum {} out of range",
                self.lr, self.momentum
            )));
        }
        if !self.variant.has_classifier() {
            return Err(Error::Unsupported(
                "variant B is not trainable; evaluate it with the heuristic".into(),
            ));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Accuracy of the train-mode predictions seen during the epoch.
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

pub struct TrainOutcome {
    pub model: TrainedModel,
    pub log: Vec<EpochRecord>,
    pub test_metrics: Metrics,
}

/// `epoch mean_loss train_accuracy test_accuracy`, one line per epoch.
pub fn format_log(log: &[EpochRecord]) -> String {
    let mut s = String::new();
    for r in log {
        let _ = writeln!(
            s,
            "{} {:.6} {:.4} {:.4}",
            r.epoch, r.mean_loss, r.train_accuracy, r.test_accuracy
        );
    }
    s
}

/// Trains on the dataset at `cfg.dataset`, writing the model to `out` and the
/// log to `log_path`.
pub fn train(cfg: &TrainConfig, out: &Path, log_path: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dataset = read_dataset(&cfg.dataset)?;
    let outcome = train_on(&dataset, cfg, |_| {})?;
    write_model(out, &outcome.model.to_file())?;
    std::fs::write(log_path, format_log(&outcome.log))?;
    Ok(outcome)
}

/// Default log location next to the model: `model.lnm` → `model.log`.
pub fn default_log_path(model: &Path) -> PathBuf {
    model.with_extension("log")
}

/// Trains in memory, calling `progress` after each epoch.
pub fn train_on(
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let arch = build_config(cfg.variant, cfg.scale)?;
    let mut state = TrainState::<f32>::new(&arch, cfg.seed)?;
    let mut meta = BTreeMap::new();
    meta.insert("variant".to_string(), cfg.variant.tag().to_string());
    if let Variant::D { n } = cfg.variant {
        meta.insert("temporal_radius".to_string(), n.to_string());
    }
    meta.insert("scale".to_string(), cfg.scale.to_string());
    meta.insert("seed".to_string(), cfg.seed.to_string());
    meta.insert("epochs".to_string(), cfg.epochs.to_string());
    meta.insert("dataset".to_string(), dataset.manifest.name.clone());
    let probe = Predictor::Model(TrainedModel {
        variant: cfg.variant,
        state: state.clone(),
        meta: meta.clone(),
    });
    check_compatible(&probe, dataset)?;

    let train_idx = dataset.split.indices(SplitName::Train);
    let test_samples = dataset.subset(SplitName::Test);
    if train_idx.is_empty() {
        return Err(Error::data("train split is empty"));
    }
    let inputs = Inputs::new(&dataset.samples, train_idx, cfg.variant, arch.input_hw)?;
    let mut order: Vec<usize> = (0..train_idx.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5348_5546);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut test_metrics = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let (x, labels) = inputs.batch(batch)?;
            let probs = state.forward(&x, Mode::Train)?;
            let loss = state.loss_and_backward(&probs, &labels)?;
            state.sgd_step(cfg.lr, cfg.momentum)?;
            loss_sum += loss as f64 * batch.len() as f64;
            correct += probs
                .argmax_rows()
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();
        }
        state.finish_epoch();
        let predicted = model_predictions(&state, cfg.variant, &test_samples)?;
        let truth: Vec<u8> = test_samples.iter().map(|s| s.label).collect();
        let metrics = Metrics::from_predictions(&truth, &predicted);
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / order.len() as f64,
            train_accuracy: correct as f64 / order.len() as f64,
            test_accuracy: metrics.accuracy,
        };
        progress(&record);
        log.push(record);
        test_metrics = Some(metrics);
    }
    Ok(TrainOutcome {
        model: TrainedModel {
            variant: cfg.variant,
            state,
            meta,
        },
        log,
        test_metrics: test_metrics.expect("at least one epoch"),
    })
}

/// Pre-assembled, downsampled classifier inputs of the train split.
struct Inputs {
    item: usize,
    channels: usize,
    hw: (usize, usize),
    values: Vec<f32>,
    labels: Vec<usize>,
}

impl Inputs {
    fn new(
        samples: &[Sample],
        idx: &[usize],
        variant: Variant,
        hw: (usize, usize),
    ) -> Result<Inputs> {
        let channels = variant.input_channels()?;
        let item = channels * hw.0 * hw.1;
        let mut values = Vec::with_capacity(idx.len() * item);
        let mut labels = Vec::with_capacity(idx.len());
        for chunk in idx.chunks(64) {
            let refs: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            values.extend_from_slice(assemble_batch(&refs, variant, hw)?.values());
            labels.extend(refs.iter().map(|s| s.label as usize));
        }
        Ok(Inputs {
            item,
            channels,
            hw,
            values,
            labels,
        })
    }

    fn batch(&self, rows: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let mut v = Vec::with_capacity(rows.len() * self.item);
        for &r in rows {
            v.extend_from_slice(&self.values[r * self.item..(r + 1) * self.item]);
        }
        let x = Tensor::from_vec(
            Shape::new(rows.len(), self.channels, self.hw.0, self.hw.1),
            v,
        )?;
        Ok((x, rows.iter().map(|&r| self.labels[r]).collect()))
    }
}
