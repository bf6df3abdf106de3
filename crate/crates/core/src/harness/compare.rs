use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::eval::{evaluate, Predictor};
use super::train::{train_on, TrainConfig};
use crate::error::{Error, Result};
use crate::maskgeom::HeuristicConfig;
use crate::models::{build_config, Scale, Variant};
use crate::scene::{Dataset, SplitName};
use crate::tensor::count_costs;

/// Lane-detector cost quoted for the mask-based variants; not computed here.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorCost {
    pub flops: u64,
    pub params: u64,
}

impl Default for DetectorCost {
    fn default() -> Self {
        DetectorCost {
            flops: 99_000_000,
            params: 35_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub scale: Scale,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub detector: DetectorCost,
    pub heuristic: HeuristicConfig,
}

impl CompareConfig {
    pub fn new(scale: Scale, seeds: Vec<u64>, epochs: usize) -> Self {
        CompareConfig {
            scale,
            seeds,
            epochs,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            detector: DetectorCost::default(),
            heuristic: HeuristicConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub variant: String,
    pub input: String,
    /// Classifier cost; `None` for the heuristic.
    pub classifier_flops: Option<u64>,
    pub classifier_params: Option<u64>,
    /// Whether the row also pays for the lane detector.
    pub uses_detector: bool,
    /// Test accuracy per seed (one entry for the deterministic heuristic).
    pub accuracies: Vec<f64>,
    pub median_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareTable {
    pub dataset: String,
    pub scale: Scale,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub detector: DetectorCost,
    pub rows: Vec<CompareRow>,
}

impl CompareTable {
    pub fn row(&self, tag: &str) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.variant == tag)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "dataset {}  scale {}  seeds {:?}  epochs {}",
            self.dataset, self.scale, self.seeds, self.epochs
        );
        let _ = writeln!(
            s,
            "{:<8} {:<24} {:>16} {:>16} {:>9}  per-seed",
            "Variant", "Input", "FLOPs", "Params", "Accuracy"
        );
        for r in &self.rows {
            let cost = |c: Option<u64>, det: u64| match (c, r.uses_detector) {
                (Some(c), true) => format!("{}+{}*", human(c), human(det)),
                (Some(c), false) => human(c),
                (None, _) => format!("{}*", human(det)),
            };
            let per_seed: Vec<String> = r.accuracies.iter().map(|a| format!("{a:.4}")).collect();
            let _ = writeln!(
                s,
                "{:<8} {:<24} {:>16} {:>16} {:>9.4}  {}",
                r.variant,
                r.input,
                cost(r.classifier_flops, self.detector.flops),
                cost(r.classifier_params, self.detector.params),
                r.median_accuracy,
                per_seed.join(" ")
            );
        }
        let _ = writeln!(
            s,
            "* lane detector cost ({} FLOPs, {} params), a configured constant, not computed.",
            human(self.detector.flops),
            human(self.detector.params)
        );
        let _ = writeln!(s, "FLOPs: 1 multiply-accumulate = 2 FLOPs; activations, pooling and normalization not counted.");
        let _ = writeln!(s, "Accuracy: median test accuracy over seeds.");
        s
    }
}

fn human(v: u64) -> String {
    if v >= 1_000_000 {
        format!("{:.2}M", v as f64 / 1e6)
    } else if v >= 1_000 {
        format!("{:.1}K", v as f64 / 1e3)
    } else {
        v.to_string()
    }
}

/// Median; mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Trains A, C and D once per seed, evaluates B, and tabulates cost and median
/// test accuracy. `progress` receives one line per finished job.
pub fn compare(
    dataset: &Dataset,
    cfg: &CompareConfig,
    mut progress: impl FnMut(&str),
) -> Result<CompareTable> {
    if cfg.seeds.is_empty() {
        return Err(Error::usage("compare needs at least one seed"));
    }
    if dataset.manifest.temporal_radius < 1 {
        return Err(Error::data(
            "compare needs a dataset with masks for t±1 (variant D)",
        ));
    }
    let mut rows = Vec::with_capacity(4);
    for variant in Variant::ALL {
        let row = if variant.has_classifier() {
            let costs = count_costs(&build_config(variant, cfg.scale)?)?;
            let mut accuracies = Vec::with_capacity(cfg.seeds.len());
            for &seed in &cfg.seeds {
                let mut tc = TrainConfig::new("", variant, cfg.scale, cfg.epochs, seed);
                tc.batch_size = cfg.batch_size;
                tc.lr = cfg.lr;
                tc.momentum = cfg.momentum;
                let outcome = train_on(dataset, &tc, |_| {})?;
                accuracies.push(outcome.test_metrics.accuracy);
                progress(&format!(
                    "variant {variant} seed {seed}: test accuracy {:.4}",
                    outcome.test_metrics.accuracy
                ));
            }
            CompareRow {
                variant: variant.tag().into(),
                input: variant.description().into(),
                classifier_flops: Some(costs.flops),
                classifier_params: Some(costs.params),
                uses_detector: variant != Variant::A,
                median_accuracy: median(&accuracies),
                accuracies,
            }
        } else {
            let metrics = evaluate(
                &Predictor::Heuristic(cfg.heuristic),
                dataset,
                SplitName::Test,
            )?;
            progress(&format!("variant B: test accuracy {:.4}", metrics.accuracy));
            CompareRow {
                variant: variant.tag().into(),
                input: variant.description().into(),
                classifier_flops: None,
                classifier_params: None,
                uses_detector: true,
                accuracies: vec![metrics.accuracy],
                median_accuracy: metrics.accuracy,
            }
        };
        rows.push(row);
    }
    Ok(CompareTable {
        dataset: dataset.manifest.name.clone(),
        scale: cfg.scale,
        seeds: cfg.seeds.clone(),
        epochs: cfg.epochs,
        detector: cfg.detector,
        rows,
    })
}
