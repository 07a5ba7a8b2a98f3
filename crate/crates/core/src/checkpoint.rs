//! On-disk training state: a flat little-endian array container plus a JSON
//! manifest, both written deterministically.
//!
//! A checkpoint is a directory holding `params.bin` and `manifest.json`.
//! `params.bin` starts with the magic bytes `TPCNARR1` and an entry count
//! (u64), then per entry: name length (u32), UTF-8 name, rows and cols
//! (u64 each) and `rows × cols` f64 values, all little-endian. Optimizer
//! moments are stored as entries named `adam.m/<param>` and `adam.v/<param>`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, Matrix, ParamStore};
use crate::error::{Error, Result};
use crate::network::{ModelConfig, TrainState};

const MAGIC: &[u8; 8] = b"TPCNARR1";
pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
const MOMENT1: &str = "adam.m/";
const MOMENT2: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub global_step: u64,
    pub epoch: u32,
    pub model: ModelConfig,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub state: TrainState,
}

fn corrupt(param: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        param: param.into(),
        message: message.into(),
    }
}

/// Serializes named arrays in the given order.
pub fn encode_arrays<'a, I>(arrays: I) -> Vec<u8>
where
    I: IntoIterator<Item = (&'a str, &'a Matrix)>,
{
    let arrays: Vec<(&str, &Matrix)> = arrays.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(arrays.len() as u64).to_le_bytes());
    for (name, m) in arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt(PARAMS_FILE, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses the array container, preserving entry order.
pub fn decode_arrays(bytes: &[u8]) -> Result<Vec<(String, Matrix)>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(corrupt(PARAMS_FILE, "not a parameter container"));
    }
    let count = c.u64()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name =
            String::from_utf8(c.take(len)?.to_vec()).map_err(|_| corrupt(PARAMS_FILE, "entry name is not UTF-8"))?;
        let rows = c.u64()? as usize;
        let cols = c.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| corrupt(name.clone(), "shape overflows"))?;
        let data = c
            .take(n)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Matrix::new(rows, cols, data)?));
    }
    if c.pos != bytes.len() {
        return Err(corrupt(PARAMS_FILE, "trailing bytes after last entry"));
    }
    Ok(out)
}

fn entries(ckpt: &Checkpoint) -> Vec<(String, &Matrix)> {
    let mut v: Vec<(String, &Matrix)> = ckpt.state.params.iter().map(|(n, m)| (n.clone(), m)).collect();
    v.extend(ckpt.state.adam.m.iter().map(|(n, m)| (format!("{MOMENT1}{n}"), m)));
    v.extend(ckpt.state.adam.v.iter().map(|(n, m)| (format!("{MOMENT2}{n}"), m)));
    v
}

pub fn manifest(ckpt: &Checkpoint) -> Manifest {
    Manifest {
        format_version: 1,
        global_step: ckpt.state.adam.step,
        epoch: ckpt.state.epoch,
        model: ckpt.model.clone(),
        arrays: entries(ckpt)
            .into_iter()
            .map(|(name, m)| ArrayEntry {
                name,
                shape: [m.rows(), m.cols()],
            })
            .collect(),
    }
}

/// Writes the checkpoint directory, creating it if needed.
pub fn save(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir)?;
    let named = entries(ckpt);
    let bytes = encode_arrays(named.iter().map(|(n, m)| (n.as_str(), *m)));
    fs::File::create(dir.join(PARAMS_FILE))?.write_all(&bytes)?;
    let mut json = serde_json::to_string_pretty(&manifest(ckpt))?;
    json.push('\n');
    fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)
        .map_err(|e| corrupt(MANIFEST_FILE, e.to_string()))?;
    if manifest.format_version != 1 {
        return Err(corrupt(
            MANIFEST_FILE,
            format!("unsupported format version {}", manifest.format_version),
        ));
    }
    let mut bytes = Vec::new();
    fs::File::open(dir.join(PARAMS_FILE))?.read_to_end(&mut bytes)?;
    let arrays = decode_arrays(&bytes)?;
    if arrays.len() != manifest.arrays.len() {
        return Err(corrupt(
            MANIFEST_FILE,
            format!(
                "manifest lists {} arrays, container holds {}",
                manifest.arrays.len(),
                arrays.len()
            ),
        ));
    }
    let mut params = ParamStore::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for ((name, value), entry) in arrays.into_iter().zip(&manifest.arrays) {
        if entry.name != name || entry.shape != [value.rows(), value.cols()] {
            return Err(corrupt(
                name,
                format!(
                    "manifest entry {} {:?} does not match container",
                    entry.name, entry.shape
                ),
            ));
        }
        if let Some(p) = name.strip_prefix(MOMENT1) {
            m.insert(p.to_string(), value);
        } else if let Some(p) = name.strip_prefix(MOMENT2) {
            v.insert(p.to_string(), value);
        } else {
            params.insert(name, value);
        }
    }
    Ok(Checkpoint {
        model: manifest.model,
        state: TrainState {
            params,
            adam: AdamState {
                step: manifest.global_step,
                m,
                v,
            },
            epoch: manifest.epoch,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Model;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig {
            n_stages: 1,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg.clone()).unwrap();
        let params = model.init_params(4);
        let mut state = TrainState::new(params.clone());
        state.epoch = 3;
        state.adam.step = 12;
        for (n, p) in params.iter() {
            let mut q = p.clone();
            q.scale_in_place(0.5);
            state.adam.m.insert(n.clone(), q.clone());
            q.scale_in_place(0.1);
            state.adam.v.insert(n.clone(), q);
        }
        Checkpoint { model: cfg, state }
    }

    #[test]
    fn round_trip_is_exact_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = sample();
        save(&dir.path().join("a"), &ckpt).unwrap();
        save(&dir.path().join("b"), &ckpt).unwrap();
        for f in [PARAMS_FILE, MANIFEST_FILE] {
            assert_eq!(
                fs::read(dir.path().join("a").join(f)).unwrap(),
                fs::read(dir.path().join("b").join(f)).unwrap()
            );
        }
        assert_eq!(load(&dir.path().join("a")).unwrap(), ckpt);
    }

    #[test]
    fn container_layout() {
        let m = Matrix::new(1, 2, vec![1.0, -2.5]).unwrap();
        let bytes = encode_arrays([("w", &m)]);
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(bytes.len(), 8 + 8 + 4 + 1 + 16 + 16);
        assert_eq!(&bytes[bytes.len() - 8..], &(-2.5f64).to_le_bytes());
        assert_eq!(decode_arrays(&bytes).unwrap(), vec![("w".to_string(), m)]);
    }

    #[test]
    fn truncated_container_is_rejected() {
        let m = Matrix::new(2, 2, vec![1.0; 4]).unwrap();
        let bytes = encode_arrays([("w", &m)]);
        assert!(matches!(
            decode_arrays(&bytes[..bytes.len() - 3]),
            Err(Error::Checkpoint { .. })
        ));
        assert!(decode_arrays(b"NOTMAGIC").is_err());
    }

    #[test]
    fn manifest_lists_names_shapes_and_step() {
        let ckpt = sample();
        let m = manifest(&ckpt);
        assert_eq!(m.global_step, 12);
        assert_eq!(m.arrays.len(), 3 * ckpt.state.params.len());
        let first = &m.arrays[0];
        assert_eq!(first.name, *ckpt.state.params.names().next().unwrap());
    }
}
