use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::corrupt::{corrupt, CorruptionConfig};
use super::render::{render_image, render_line_ids};
use super::rng::stream;
use super::{generate_scene, GeneratorConfig, SceneParams};
use crate::error::{Error, Result};

pub const SAMPLES_MAGIC: &[u8; 4] = b"LND1";
pub const SAMPLES_VERSION: u16 = 1;
const TRAIN_FRACTION: f64 = 0.8;
const MIN_SAMPLES: usize = 10;

/// Everything that determines a dataset's bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRequest {
    pub name: String,
    pub sample_count: usize,
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub corruption: CorruptionConfig,
}

impl DatasetRequest {
    pub fn new(sample_count: usize, seed: u64) -> Self {
        DatasetRequest {
            name: format!("synthetic-{seed}"),
            sample_count,
            seed,
            generator: GeneratorConfig::default(),
            corruption: CorruptionConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_count < MIN_SAMPLES {
            return Err(Error::usage(format!(
                "sample count {} below the minimum of {MIN_SAMPLES}",
                self.sample_count
            )));
        }
        let g = &self.generator;
        if g.height < 8
            || g.width < 8
            || g.height > u16::MAX as usize
            || g.width > u16::MAX as usize
        {
            return Err(Error::usage(format!(
                "image size {}x{} unsupported",
                g.height, g.width
            )));
        }
        if g.frames() > u8::MAX as usize {
            return Err(Error::usage(format!(
                "{} frames exceed the format limit",
                g.frames()
            )));
        }
        if !(0.0..=1.0).contains(&g.p_ambiguous) {
            return Err(Error::usage(format!(
                "ambiguous probability {} outside [0, 1]",
                g.p_ambiguous
            )));
        }
        self.corruption
            .validate()
            .map_err(|e| Error::usage(e.to_string()))
    }
}

/// One labeled record.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub label: u8,
    pub height: usize,
    pub width: usize,
    /// Planar, channel-major 3×H×W.
    pub image: Vec<u8>,
    /// Frame-major (2n+1)×H×W binary planes ordered `t−n..t+n`.
    pub masks: Vec<u8>,
    /// Ground truth; present for freshly generated samples only.
    pub scene: Option<SceneParams>,
}

impl Sample {
    pub fn frames(&self) -> usize {
        self.masks.len() / (self.height * self.width)
    }

    /// Mask plane `k` (0-based, `t−n` first).
    pub fn mask(&self, k: usize) -> &[u8] {
        let plane = self.height * self.width;
        &self.masks[k * plane..(k + 1) * plane]
    }

    /// The frame-`t` mask.
    pub fn center_mask(&self) -> &[u8] {
        self.mask(self.frames() / 2)
    }

    pub fn without_scene(&self) -> Sample {
        Sample {
            scene: None,
            ..self.clone()
        }
    }
}

/// Renders sample `index` of `req`; depends on nothing else.
pub fn generate_sample(req: &DatasetRequest, index: usize) -> Sample {
    let g = &req.generator;
    let idx = index as u64;
    let scene = generate_scene(g, &mut stream(req.seed, idx, 0, "scene"));
    let n = g.temporal_radius as i64;
    let plane = g.height * g.width;
    let mut masks = Vec::with_capacity(g.frames() * plane);
    let mut image = Vec::new();
    for offset in -n..=n {
        let ids = render_line_ids(&scene, offset);
        if offset == 0 {
            image = render_image(&scene, &ids).data;
        }
        let mask = corrupt(
            &ids,
            &req.corruption,
            &mut stream(req.seed, idx, offset, "corrupt"),
        );
        masks.extend_from_slice(&mask.data);
    }
    Sample {
        label: scene.label(),
        height: g.height,
        width: g.width,
        image,
        masks,
        scene: Some(scene),
    }
}

/// All samples in index order, rendered on `workers` threads.
pub fn generate_samples(req: &DatasetRequest, workers: usize) -> Vec<Sample> {
    let workers = workers.clamp(1, req.sample_count.max(1));
    if workers == 1 {
        return (0..req.sample_count)
            .map(|i| generate_sample(req, i))
            .collect();
    }
    let mut slots: Vec<Option<Sample>> = vec![None; req.sample_count];
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|wk| {
                scope.spawn(move || {
                    (wk..req.sample_count)
                        .step_by(workers)
                        .map(|i| (i, generate_sample(req, i)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, s) in h.join().expect("generator thread panicked") {
                slots[i] = Some(s);
            }
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every index generated"))
        .collect()
}

/// Index lists of the 80:20 split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "test" => Ok(SplitName::Test),
            other => Err(Error::usage(format!(
                "unknown split {other:?} (expected train|test)"
            ))),
        }
    }
}

impl Split {
    /// Seeded shuffle, first 80% to train; both lists sorted.
    pub fn derive(sample_count: usize, seed: u64) -> Split {
        let mut order: Vec<usize> = (0..sample_count).collect();
        order.shuffle(&mut stream(seed, u64::MAX, 0, "split"));
        let cut = (sample_count as f64 * TRAIN_FRACTION).floor() as usize;
        let mut train = order[..cut].to_vec();
        let mut test = order[cut..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Split { train, test }
    }

    pub fn indices(&self, which: SplitName) -> &[usize] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Test => &self.test,
        }
    }
}

/// Contents of `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub name: String,
    pub sample_count: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    #[serde(rename = "n")]
    pub temporal_radius: usize,
    pub frames: usize,
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub corruption: CorruptionConfig,
    pub class_histogram: [usize; 5],
    pub train_fraction: f64,
    pub train_count: usize,
    pub test_count: usize,
}

/// A dataset read back from disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub split: Split,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn subset(&self, which: SplitName) -> Vec<&Sample> {
        self.split
            .indices(which)
            .iter()
            .map(|&i| &self.samples[i])
            .collect()
    }
}

pub fn encode_samples(samples: &[Sample], height: usize, width: usize, frames: usize) -> Vec<u8> {
    let per = 1 + (3 + frames) * height * width;
    let mut out = Vec::with_capacity(15 + samples.len() * per);
    out.extend_from_slice(SAMPLES_MAGIC);
    out.extend_from_slice(&SAMPLES_VERSION.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    out.extend_from_slice(&(height as u16).to_le_bytes());
    out.extend_from_slice(&(width as u16).to_le_bytes());
    out.push(frames as u8);
    for s in samples {
        out.push(s.label);
        out.extend_from_slice(&s.image);
        out.extend_from_slice(&s.masks);
    }
    out
}

pub fn decode_samples(bytes: &[u8]) -> Result<Vec<Sample>> {
    let header = 15;
    if bytes.len() < header || &bytes[..4] != SAMPLES_MAGIC {
        return Err(Error::format("samples file: bad magic"));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let version = u16_at(4);
    if version != SAMPLES_VERSION {
        return Err(Error::format(format!(
            "samples file: unsupported version {version}"
        )));
    }
    let count = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let (height, width, frames) = (u16_at(10) as usize, u16_at(12) as usize, bytes[14] as usize);
    let plane = height * width;
    let per = 1 + (3 + frames) * plane;
    if bytes.len() != header + count * per {
        return Err(Error::format(format!(
            "samples file: expected {} bytes for {count} samples, found {}",
            header + count * per,
            bytes.len()
        )));
    }
    let mut samples = Vec::with_capacity(count);
    for rec in bytes[header..].chunks_exact(per) {
        let label = rec[0];
        if label > 4 {
            return Err(Error::data(format!("label {label} outside 0..=4")));
        }
        samples.push(Sample {
            label,
            height,
            width,
            image: rec[1..1 + 3 * plane].to_vec(),
            masks: rec[1 + 3 * plane..].to_vec(),
            scene: None,
        });
    }
    Ok(samples)
}

/// Generates `req` and writes `manifest.json`, `split.json` and `samples.bin` into `dir`.
pub fn write_dataset(dir: &Path, req: &DatasetRequest, workers: usize) -> Result<DatasetManifest> {
    req.validate()?;
    let samples = generate_samples(req, workers);
    let g = &req.generator;
    let mut class_histogram = [0usize; 5];
    for s in &samples {
        class_histogram[s.label as usize] += 1;
    }
    let split = Split::derive(req.sample_count, req.seed);
    let manifest = DatasetManifest {
        format: String::from_utf8_lossy(SAMPLES_MAGIC).into_owned(),
        name: req.name.clone(),
        sample_count: req.sample_count,
        height: g.height,
        width: g.width,
        temporal_radius: g.temporal_radius,
        frames: g.frames(),
        seed: req.seed,
        generator: g.clone(),
        corruption: req.corruption,
        class_histogram,
        train_fraction: TRAIN_FRACTION,
        train_count: split.train.len(),
        test_count: split.test.len(),
    };
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    fs::write(
        dir.join("split.json"),
        serde_json::to_string(&split)? + "\n",
    )?;
    fs::write(
        dir.join("samples.bin"),
        encode_samples(&samples, g.height, g.width, g.frames()),
    )?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let read = |name: &str| {
        fs::read(dir.join(name))
            .map_err(|e| Error::data(format!("{}: {e}", dir.join(name).display())))
    };
    let manifest: DatasetManifest = serde_json::from_slice(&read("manifest.json")?)?;
    let split: Split = serde_json::from_slice(&read("split.json")?)?;
    let samples = decode_samples(&read("samples.bin")?)?;
    let first = samples.first();
    if samples.len() != manifest.sample_count
        || first.is_some_and(|s| {
            s.height != manifest.height
                || s.width != manifest.width
                || s.frames() != manifest.frames
        })
    {
        return Err(Error::data("samples.bin disagrees with manifest.json"));
    }
    if manifest.class_histogram.iter().sum::<usize>() != manifest.sample_count {
        return Err(Error::data("class histogram does not sum to sample count"));
    }
    let mut seen = vec![false; manifest.sample_count];
    for &i in split.train.iter().chain(&split.test) {
        if i >= seen.len() || std::mem::replace(&mut seen[i], true) {
            return Err(Error::data(format!(
                "split index {i} out of range or repeated"
            )));
        }
    }
    Ok(Dataset {
        manifest,
        split,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_of_1000_is_800_200() {
        let s = Split::derive(1000, 9);
        assert_eq!((s.train.len(), s.test.len()), (800, 200));
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
    }

    #[test]
    fn worker_count_does_not_change_samples() {
        let req = DatasetRequest::new(12, 4);
        assert_eq!(generate_samples(&req, 1), generate_samples(&req, 3));
    }

    #[test]
    fn encode_decode_round_trip() {
        let req = DatasetRequest::new(10, 2);
        let samples = generate_samples(&req, 1);
        let bytes = encode_samples(&samples, 100, 100, 3);
        let back = decode_samples(&bytes).unwrap();
        let stripped: Vec<Sample> = samples.iter().map(Sample::without_scene).collect();
        assert_eq!(back, stripped);
        assert!(decode_samples(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn small_requests_are_rejected() {
        assert!(matches!(
            DatasetRequest::new(9, 0).validate(),
            Err(Error::Usage(_))
        ));
    }
}
