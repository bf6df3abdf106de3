use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::maskgeom::{predict_lane_heuristic, HeuristicConfig};
use crate::models::{assemble_batch, Scale, Variant};
use crate::scene::{Dataset, Sample, SplitName};
use crate::tensor::{ModelFile, TrainState, NUM_CLASSES};

const EVAL_BATCH: usize = 64;

/// Accuracy and confusion counts; `confusion[truth][prediction]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
    /// `None` for classes absent from the evaluated samples.
    pub recall: [Option<f64>; NUM_CLASSES],
    pub sample_count: usize,
}

impl Metrics {
    pub fn from_predictions(truth: &[u8], predicted: &[u8]) -> Metrics {
        let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
        for (&t, &p) in truth.iter().zip(predicted) {
            confusion[t as usize][p as usize] += 1;
        }
        let sample_count = truth.len();
        let correct: usize = (0..NUM_CLASSES).map(|k| confusion[k][k]).sum();
        let mut recall = [None; NUM_CLASSES];
        for (k, r) in recall.iter_mut().enumerate() {
            let row: usize = confusion[k].iter().sum();
            if row > 0 {
                *r = Some(confusion[k][k] as f64 / row as f64);
            }
        }
        let accuracy = if sample_count == 0 {
            0.0
        } else {
            correct as f64 / sample_count as f64
        };
        Metrics {
            accuracy,
            confusion,
            recall,
            sample_count,
        }
    }
}

impl std::fmt::Display for Metrics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "samples  {}", self.sample_count)?;
        writeln!(f, "accuracy {:.4}", self.accuracy)?;
        writeln!(f, "confusion (rows = truth, columns = prediction)")?;
        writeln!(
            f,
            "       {}",
            (0..NUM_CLASSES)
                .map(|k| format!("{k:>6}"))
                .collect::<String>()
        )?;
        for (k, row) in self.confusion.iter().enumerate() {
            let recall = self.recall[k].map_or("     -".to_string(), |r| format!("{r:>6.3}"));
            writeln!(
                f,
                "  {k:>3}  {}   recall {recall}",
                row.iter().map(|v| format!("{v:>6}")).collect::<String>()
            )?;
        }
        Ok(())
    }
}

/// Anything that maps samples to lane numbers.
pub enum Predictor {
    Model(TrainedModel),
    Heuristic(HeuristicConfig),
}

/// A classifier with the variant it was trained for.
pub struct TrainedModel {
    pub variant: Variant,
    pub state: TrainState<f32>,
    pub meta: BTreeMap<String, String>,
}

impl TrainedModel {
    pub fn from_file(file: ModelFile) -> Result<TrainedModel> {
        let tag = file
            .meta
            .get("variant")
            .ok_or_else(|| Error::format("model file has no variant tag"))?;
        let mut variant: Variant = tag.parse()?;
        if let Variant::D { n } = &mut variant {
            if let Some(r) = file.meta.get("temporal_radius") {
                *n = r
                    .parse()
                    .map_err(|_| Error::format(format!("bad temporal radius {r:?}")))?;
            }
        }
        if variant.input_channels()? != file.state.arch().input_channels {
            return Err(Error::config(format!(
                "model stem takes {} channels, variant {variant} needs {}",
                file.state.arch().input_channels,
                variant.input_channels()?
            )));
        }
        Ok(TrainedModel {
            variant,
            state: file.state,
            meta: file.meta,
        })
    }

    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            meta: self.meta.clone(),
            state: self.state.clone(),
        }
    }

    pub fn scale(&self) -> Option<Scale> {
        self.meta.get("scale").and_then(|s| s.parse().ok())
    }
}

impl Predictor {
    pub fn variant(&self) -> Variant {
        match self {
            Predictor::Model(m) => m.variant,
            Predictor::Heuristic(_) => Variant::B,
        }
    }

    /// Lane numbers for `samples`, in order; eval mode only.
    pub fn predict(&self, samples: &[&Sample]) -> Result<Vec<u8>> {
        match self {
            Predictor::Heuristic(cfg) => Ok(samples
                .iter()
                .map(|s| predict_lane_heuristic(s.center_mask(), s.width, cfg))
                .collect()),
            Predictor::Model(m) => model_predictions(&m.state, m.variant, samples),
        }
    }

    pub fn evaluate_samples(&self, samples: &[&Sample]) -> Result<Metrics> {
        let predicted = self.predict(samples)?;
        let truth: Vec<u8> = samples.iter().map(|s| s.label).collect();
        Ok(Metrics::from_predictions(&truth, &predicted))
    }
}

pub(crate) fn model_predictions(
    state: &TrainState<f32>,
    variant: Variant,
    samples: &[&Sample],
) -> Result<Vec<u8>> {
    let hw = state.arch().input_hw;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let x = assemble_batch(chunk, variant, hw)?;
        let probs = state.predict(&x)?;
        out.extend(probs.argmax_rows().into_iter().map(|k| k as u8));
    }
    Ok(out)
}

/// Eval-mode metrics of `predictor` on one split of `dataset`.
pub fn evaluate(predictor: &Predictor, dataset: &Dataset, split: SplitName) -> Result<Metrics> {
    check_compatible(predictor, dataset)?;
    predictor.evaluate_samples(&dataset.subset(split))
}

/// Rejects models whose input geometry or frame needs the dataset cannot meet.
pub fn check_compatible(predictor: &Predictor, dataset: &Dataset) -> Result<()> {
    let m = &dataset.manifest;
    if predictor.variant().required_radius() > m.temporal_radius {
        return Err(Error::data(format!(
            "variant {} needs masks for t±{}, dataset has radius {}",
            predictor.variant(),
            predictor.variant().required_radius(),
            m.temporal_radius
        )));
    }
    if let Predictor::Model(model) = predictor {
        let (h, w) = model.state.arch().input_hw;
        if m.height % h != 0 || m.width % w != 0 || m.height / h != m.width / w {
            return Err(Error::config(format!(
                "model input {h}x{w} does not divide dataset images {}x{}",
                m.height, m.width
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_predictor_on_balanced_set_scores_one_fifth() {
        let truth: Vec<u8> = (0..100).map(|i| (i % 5) as u8).collect();
        let m = Metrics::from_predictions(&truth, &[0; 100]);
        assert!((m.accuracy - 0.2).abs() < 1e-12);
        for k in 0..5 {
            assert_eq!(m.confusion[k].iter().sum::<usize>(), 20);
        }
        assert_eq!(m.recall[0], Some(1.0));
        assert_eq!(m.recall[3], Some(0.0));
        let total: usize = m.confusion.iter().flatten().sum();
        assert_eq!(total, m.sample_count);
    }
}
