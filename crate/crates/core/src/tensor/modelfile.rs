//! `LNM1` model files.
//!
//! Layout (little-endian, no padding):
//! magic `LNM1` | version u16 | header length u32 | UTF-8 JSON header
//! (`{"arch": ArchConfig, "meta": {..}}`) | every weight array as f32 in
//! [`TrainState::weight_arrays`] order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchConfig, TrainState};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"LNM1";
pub const MODEL_VERSION: u16 = 1;

/// A decoded model: weights plus free-form string metadata (variant tag, scale).
#[derive(Clone)]
pub struct ModelFile {
    pub meta: BTreeMap<String, String>,
    pub state: TrainState<f32>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    meta: BTreeMap<String, String>,
}

impl ModelFile {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_string(&Header {
            arch: self.state.arch().clone(),
            meta: self.meta.clone(),
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        let len =
            u32::try_from(header.len()).map_err(|_| Error::format("model header too large"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for (_, arr) in self.state.weight_arrays() {
            for v in arr {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let magic = take(&mut cur, 4)?;
        if magic != MODEL_MAGIC {
            return Err(Error::format("not an LNM1 model file (bad magic)"));
        }
        let version = u16::from_le_bytes(take(&mut cur, 2)?.try_into().unwrap());
        if version != MODEL_VERSION {
            return Err(Error::format(format!(
                "unsupported model version {version}"
            )));
        }
        let len = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
        let text = std::str::from_utf8(take(&mut cur, len)?)
            .map_err(|_| Error::format("model header is not UTF-8"))?;
        let header: Header = serde_json::from_str(text)?;
        let mut state = TrainState::<f32>::new(&header.arch, 0)?;
        for arr in state.weight_arrays_mut() {
            let raw = take(&mut cur, arr.len() * 4)?;
            for (dst, chunk) in arr.iter_mut().zip(raw.chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        if !cur.is_empty() {
            return Err(Error::format(format!(
                "{} trailing bytes after weights",
                cur.len()
            )));
        }
        Ok(ModelFile {
            meta: header.meta,
            state,
        })
    }
}

fn take<'a>(cur: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if cur.len() < n {
        return Err(Error::format("model file truncated"));
    }
    let (head, tail) = cur.split_at(n);
    *cur = tail;
    Ok(head)
}

pub fn write_model(path: &Path, model: &ModelFile) -> Result<()> {
    std::fs::write(path, model.encode()?)?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<ModelFile> {
    ModelFile::decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Mode, Shape, Tensor};

    fn sample_model() -> ModelFile {
        let mut state = TrainState::<f32>::new(&ArchConfig::desk_scale(4), 17).unwrap();
        // move the running stats so they are not at their defaults
        let x = Tensor::from_vec(
            Shape::new(2, 4, 50, 50),
            (0..20_000).map(|i| (i % 7) as f32 * 0.1).collect(),
        )
        .unwrap();
        state.forward(&x, Mode::Train).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("variant".into(), "C".into());
        ModelFile { meta, state }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = sample_model();
        let bytes = model.encode().unwrap();
        assert_eq!(&bytes[..4], b"LNM1");
        let back = ModelFile::decode(&bytes).unwrap();
        assert_eq!(back.meta, model.meta);
        assert_eq!(back.encode().unwrap(), bytes);
        for ((_, a), (_, b)) in model
            .state
            .weight_arrays()
            .iter()
            .zip(back.state.weight_arrays())
        {
            assert_eq!(
                a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let bytes = sample_model().encode().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ModelFile::decode(&bad), Err(Error::Format(_))));
        assert!(matches!(
            ModelFile::decode(&bytes[..bytes.len() - 1]),
            Err(Error::Format(_))
        ));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(ModelFile::decode(&long), Err(Error::Format(_))));
    }
}
