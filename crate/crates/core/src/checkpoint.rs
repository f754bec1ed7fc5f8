//! Named-tensor checkpoints: a JSON manifest of names, shapes and offsets
//! next to a flat little-endian `f64` payload.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ParamSet, Tensor};

const FORMAT: &str = "sane-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("checkpoint format {format:?} version {version} is not supported")]
    Format { format: String, version: u32 },
    #[error("checkpoint entry {name:?}: {message}")]
    Entry { name: String, message: String },
    #[error("checkpoint payload holds {actual} bytes, manifest describes {expected}")]
    Payload { expected: usize, actual: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds every parameter of `params` as `{prefix}/{name}`.
    pub fn with_params(mut self, prefix: &str, params: &ParamSet) -> Self {
        for (_, name, value) in params.iter() {
            self.entries.push((format!("{prefix}/{name}"), value.clone()));
        }
        self
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.push((name.into(), value));
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Overwrites every parameter of `params` from `{prefix}/{name}`.
    pub fn restore(&self, prefix: &str, params: &mut ParamSet) -> Result<(), CheckpointError> {
        let ids: Vec<_> = params.iter().map(|(id, name, _)| (id, name.to_string())).collect();
        for (id, name) in ids {
            let key = format!("{prefix}/{name}");
            let stored = self.get(&key).ok_or_else(|| CheckpointError::Entry {
                name: key.clone(),
                message: "missing".into(),
            })?;
            if stored.shape() != params.get(id).shape() {
                return Err(CheckpointError::Entry {
                    name: key,
                    message: format!(
                        "stored shape {:?} does not match {:?}",
                        stored.shape(),
                        params.get(id).shape()
                    ),
                });
            }
            *params.get_mut(id) = stored.clone();
        }
        Ok(())
    }

    /// Returns the manifest text and the payload bytes.
    pub fn encode(&self) -> (String, Vec<u8>) {
        let mut offset = 0;
        let mut payload = Vec::new();
        let entries = self
            .entries
            .iter()
            .map(|(name, t)| {
                let e = ManifestEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.numel();
                for x in t.data() {
                    payload.extend_from_slice(&x.to_le_bytes());
                }
                e
            })
            .collect();
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            entries,
        };
        (
            serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
            payload,
        )
    }

    pub fn decode(manifest: &str, payload: &[u8]) -> Result<Self, CheckpointError> {
        let m: Manifest = serde_json::from_str(manifest)?;
        if m.format != FORMAT || m.version != VERSION {
            return Err(CheckpointError::Format {
                format: m.format,
                version: m.version,
            });
        }
        if payload.len() % 8 != 0 {
            return Err(CheckpointError::Payload {
                expected: payload.len() / 8 * 8,
                actual: payload.len(),
            });
        }
        let floats: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let mut seen = HashSet::new();
        let mut next = 0usize;
        let mut entries = Vec::with_capacity(m.entries.len());
        for e in m.entries {
            let entry_err = |message: String| CheckpointError::Entry {
                name: e.name.clone(),
                message,
            };
            if !seen.insert(e.name.clone()) {
                return Err(entry_err("duplicate name".into()));
            }
            if e.offset != next {
                return Err(entry_err(format!("offset {} where {next} was expected", e.offset)));
            }
            let numel = e
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| entry_err(format!("shape {:?} overflows", e.shape)))?;
            let end = next
                .checked_add(numel)
                .filter(|&end| end <= floats.len())
                .ok_or_else(|| CheckpointError::Payload {
                    expected: next.saturating_add(numel).saturating_mul(8),
                    actual: payload.len(),
                })?;
            let t = Tensor::new(e.shape.clone(), floats[next..end].to_vec())
                .map_err(|err| entry_err(err.to_string()))?;
            entries.push((e.name, t));
            next = end;
        }
        if next != floats.len() {
            return Err(CheckpointError::Payload {
                expected: next * 8,
                actual: payload.len(),
            });
        }
        Ok(Self { entries })
    }

    /// Writes `{stem}.json` and `{stem}.bin` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(), CheckpointError> {
        let (manifest, payload) = self.encode();
        fs::create_dir_all(dir).map_err(|source| CheckpointError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        for (path, bytes) in [
            (dir.join(format!("{stem}.json")), manifest.into_bytes()),
            (dir.join(format!("{stem}.bin")), payload),
        ] {
            fs::write(&path, bytes).map_err(|source| CheckpointError::Io { path, source })?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self, CheckpointError> {
        let read = |path: PathBuf| fs::read(&path).map_err(|source| CheckpointError::Io { path, source });
        let manifest = read(dir.join(format!("{stem}.json")))?;
        let payload = read(dir.join(format!("{stem}.bin")))?;
        let text = String::from_utf8(manifest).map_err(|e| CheckpointError::Entry {
            name: stem.into(),
            message: format!("manifest is not UTF-8: {e}"),
        })?;
        Self::decode(&text, &payload)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.push("w/a", Tensor::from_rows(&[vec![1.0, -2.5], vec![3.0, 1e-300]]).unwrap());
        c.push("alpha/n0", Tensor::vector(vec![0.1; 11]));
        c.push("empty", Tensor::zeros(&[0, 4]));
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let (m, p) = c.encode();
        assert_eq!(p.len(), (4 + 11) * 8);
        assert_eq!(Checkpoint::decode(&m, &p).unwrap(), c);
        let dir = tempfile::tempdir().unwrap();
        c.save(dir.path(), "ckpt").unwrap();
        assert_eq!(Checkpoint::load(dir.path(), "ckpt").unwrap(), c);
    }

    #[test]
    fn rejects_truncated_payload() {
        let (m, p) = sample().encode();
        assert!(matches!(
            Checkpoint::decode(&m, &p[..p.len() - 8]),
            Err(CheckpointError::Payload { .. })
        ));
        assert!(Checkpoint::decode(&m, &p[..p.len() - 3]).is_err());
    }

    #[test]
    fn rejects_duplicates_and_bad_offsets() {
        let (m, p) = sample().encode();
        let dup = m.replace("alpha/n0", "w/a");
        assert!(dup.contains("w/a") && Checkpoint::decode(&dup, &p).is_err());
        let shifted = m.replace("\"offset\": 4", "\"offset\": 5");
        assert!(Checkpoint::decode(&shifted, &p).is_err());
        assert!(Checkpoint::decode("{}", &p).is_err());
    }

    #[test]
    fn restore_checks_names_and_shapes() {
        let mut params = ParamSet::new();
        params.add("a", Tensor::zeros(&[2, 2]));
        let c = sample();
        c.restore("w", &mut params).unwrap();
        assert_eq!(params.values()[0].data()[2], 3.0);
        let mut wrong = ParamSet::new();
        wrong.add("a", Tensor::zeros(&[4]));
        assert!(c.restore("w", &mut wrong).is_err());
        assert!(c.restore("missing", &mut params).is_err());
    }
}
