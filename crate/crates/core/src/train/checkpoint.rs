//! `SK2G` checkpoint files.
//!
//! ```text
//! "SK2G" | u32 version=1 | u32 length | UTF-8 JSON metadata | u32 tensor count
//! per tensor: u32 length | name | u8 dtype (0 f32, 1 f64) | u32 rank | rank × u32 dims | data
//! ```
//! Integers and floats are little-endian; tensors are stored sorted by name.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::MetricRow;
use crate::error::{Error, Result};
use crate::network::{Model, ModelKind};
use crate::skeleton::{put_string, put_u32, ByteReader};
use crate::tensor::{DType, Scalar, Tensor};
use crate::transform::GridSize;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SK2G";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    /// Grid of the network input (`1×N` for the baseline).
    pub grid: GridSize,
    /// Cascade grids, one per stage.
    pub stages: Vec<GridSize>,
    /// Stage number this checkpoint closes (1-based; 0 without cascade).
    pub stage_index: usize,
    /// Names of tensors that were frozen while training this stage.
    pub frozen: Vec<String>,
    pub config_hash: String,
    /// Resolved run configuration.
    pub config: serde_json::Value,
    pub metrics: Vec<MetricRow>,
}

/// A tensor of either element type.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => StoredTensor::F32(t.cast()),
            DType::F64 => StoredTensor::F64(t.cast()),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    /// Converted to `T` (exact when the element types agree).
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, StoredTensor>,
}

/// What happened when a checkpoint was applied to a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Model tensors the checkpoint does not provide.
    pub missing: Vec<String>,
    /// Checkpoint tensors the model has no slot for.
    pub unused: Vec<String>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &mut Model<T>, meta: CheckpointMeta) -> Result<Self> {
        let tensors =
            model.named_tensors()?.into_iter().map(|(n, t)| (n, StoredTensor::from_tensor(&t))).collect();
        Ok(Checkpoint { meta, tensors })
    }

    pub fn dtype(&self) -> Option<DType> {
        self.tensors.values().next().map(StoredTensor::dtype)
    }

    /// Copies every matching tensor into `model`. Shape conflicts are load
    /// errors; with `strict`, so are model tensors the checkpoint lacks.
    /// Stored assignments are installed after their assistant matrices.
    pub fn apply<T: Scalar>(&self, model: &mut Model<T>, strict: bool) -> Result<LoadReport> {
        let mut report = LoadReport::default();
        let (phi, rest): (Vec<_>, Vec<_>) = self.tensors.iter().partition(|(n, _)| n.ends_with(".phi"));
        for (name, t) in rest.into_iter().chain(phi) {
            if model.load_tensor(name, &t.to_tensor())? {
                report.loaded.push(name.clone());
            } else {
                report.unused.push(name.clone());
            }
        }
        report.missing = model
            .named_tensors()?
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| !self.tensors.contains_key(n))
            .collect();
        if strict && !report.missing.is_empty() {
            return Err(Error::Load(format!("checkpoint is missing tensors: {}", report.missing.join(", "))));
        }
        Ok(report)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION as usize)?;
        put_string(&mut out, &serde_json::to_string(&self.meta)?)?;
        put_u32(&mut out, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_string(&mut out, name)?;
            out.push(t.dtype().tag());
            put_u32(&mut out, t.shape().len())?;
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
            match t {
                StoredTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                StoredTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        r.version(CHECKPOINT_VERSION)?;
        let meta_at = r.offset();
        let meta: CheckpointMeta = serde_json::from_str(r.string("metadata")?)
            .map_err(|e| Error::Format { offset: meta_at, msg: format!("metadata: {e}") })?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = BTreeMap::new();
        let mut prev: Option<String> = None;
        for _ in 0..count {
            let name_at = r.offset();
            let name = r.string("tensor name")?.to_owned();
            if prev.as_ref().is_some_and(|p| *p >= name) {
                return Err(Error::Format { offset: name_at, msg: format!("tensor `{name}` out of order or repeated") });
            }
            let tag_at = r.offset();
            let dtype = DType::from_tag(r.u8("dtype")?)
                .ok_or_else(|| Error::Format { offset: tag_at, msg: "unknown dtype tag".into() })?;
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank).map(|_| r.u32("dimension").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(dtype.size()))
                .ok_or_else(|| r.error(format!("tensor `{name}` size overflows")))?;
            let raw = r.take(numel, &format!("data of `{name}`"))?;
            let t = match dtype {
                DType::F32 => StoredTensor::F32(Tensor::new(shape, raw.chunks_exact(4).map(f32::read_le).collect())?),
                DType::F64 => StoredTensor::F64(Tensor::new(shape, raw.chunks_exact(8).map(f64::read_le).collect())?),
            };
            tensors.insert(name.clone(), t);
            prev = Some(name);
        }
        r.finish()?;
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::Split;

    fn sample() -> Checkpoint {
        let mut tensors = BTreeMap::new();
        tensors.insert("a".to_string(), StoredTensor::F32(Tensor::from_fn(&[2, 3], |i| i as f32 * 0.1)));
        tensors.insert("b".to_string(), StoredTensor::F64(Tensor::from_fn(&[4], |i| (i as f64).exp())));
        let meta = CheckpointMeta {
            kind: ModelKind::Ske2grid,
            grid: GridSize::new(5, 5),
            stages: vec![GridSize::new(5, 5)],
            stage_index: 1,
            frozen: vec![],
            config_hash: "00".into(),
            config: serde_json::json!({"x": 1}),
            metrics: vec![MetricRow { epoch: 1, split: Split::Val, loss: 0.1 + 0.2, top1: 1.0 / 3.0 }],
        };
        Checkpoint { meta, tensors }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let bytes = c.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = sample().encode().unwrap();
        let mut bad = bytes.clone();
        bad[1] = b'?';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format { offset: 4, .. })));
        for cut in [2, 9, 40, bytes.len() - 3] {
            assert!(matches!(Checkpoint::decode(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
    }
}
