use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::{TrainConfig, Trainer};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// One tensor: shape plus base64 of its little-endian f64 values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: String,
}

impl StoredTensor {
    pub fn encode(name: &str, t: &Tensor) -> Self {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Tensor> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| Error::Checkpoint(format!("tensor `{}`: bad base64: {e}", self.name)))?;
        let n: usize = self.shape.iter().product();
        if bytes.len() != n * 8 {
            return Err(Error::Checkpoint(format!(
                "tensor `{}`: shape {:?} needs {} bytes, found {}",
                self.name,
                self.shape,
                n * 8,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Tensor::new(self.shape.clone(), data)
    }
}

/// Serialized trainer state: parameters, Adam moments, config echo and step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub step: u64,
    pub seed: u64,
    pub adam_t: u64,
    pub config: TrainConfig,
    pub tensors: Vec<StoredTensor>,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u32,
}

impl Checkpoint {
    pub fn from_trainer(tr: &Trainer) -> Self {
        let mut tensors: Vec<StoredTensor> = tr
            .model
            .params()
            .iter()
            .map(|(name, _, t)| StoredTensor::encode(name, t))
            .collect();
        for (name, (m, v)) in tr
            .learnable_names()
            .iter()
            .zip(tr.adam.m.iter().zip(&tr.adam.v))
        {
            tensors.push(StoredTensor::encode(&format!("adam.m.{name}"), m));
            tensors.push(StoredTensor::encode(&format!("adam.v.{name}"), v));
        }
        Self {
            version: CHECKPOINT_VERSION,
            step: tr.step,
            seed: tr.config.seed,
            adam_t: tr.adam.t,
            config: tr.config.clone(),
            tensors,
        }
    }

    /// Rebuilds the trainer, validating every tensor name and shape.
    pub fn to_trainer(&self) -> Result<Trainer> {
        let mut tr = Trainer::new(self.config.clone())?;
        let mut expected: Vec<(String, Vec<usize>)> = tr
            .model
            .params()
            .iter()
            .map(|(n, _, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        let names = tr.learnable_names();
        for (name, m) in names.iter().zip(&tr.adam.m) {
            expected.push((format!("adam.m.{name}"), m.shape().to_vec()));
            expected.push((format!("adam.v.{name}"), m.shape().to_vec()));
        }
        if expected.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        let mut decoded = Vec::with_capacity(expected.len());
        for ((name, shape), st) in expected.iter().zip(&self.tensors) {
            if &st.name != name {
                return Err(Error::Checkpoint(format!(
                    "expected tensor `{name}`, found `{}`",
                    st.name
                )));
            }
            if &st.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}`: shape {:?}, expected {:?}",
                    st.shape, shape
                )));
            }
            decoded.push(st.decode()?);
        }
        let n_params = tr.model.params().len();
        let mut rest = decoded.split_off(n_params);
        for (dst, src) in tr.model.params_mut().into_iter().zip(decoded) {
            *dst = src;
        }
        let mut m = Vec::new();
        let mut v = Vec::new();
        while !rest.is_empty() {
            m.push(rest.remove(0));
            v.push(rest.remove(0));
        }
        tr.adam.m = m;
        tr.adam.v = v;
        tr.adam.t = self.adam_t;
        tr.step = self.step;
        Ok(tr)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let probe: VersionProbe = serde_json::from_str(text)
            .map_err(|e| Error::Checkpoint(format!("unreadable: {e}")))?;
        if probe.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: probe.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
