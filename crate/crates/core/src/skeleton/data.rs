use serde::{Deserialize, Serialize};

use super::synth::SynthParams;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Joint feature width: 3-D coordinates, or 2-D coordinates plus a
/// confidence score (zero-filled when the source has none).
pub const CHANNELS: usize = 3;

/// One action clip of a single actor.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    /// `(T, N, 3)`.
    pub frames: Tensor<f32>,
    pub label: usize,
    pub source: String,
}

impl SkeletonSequence {
    pub fn n_frames(&self) -> usize {
        self.frames.dim(0)
    }

    pub fn n_joints(&self) -> usize {
        self.frames.dim(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    /// Name of the skeleton graph the joints follow.
    pub graph: String,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    /// Per-sequence source identifiers, in file order.
    pub sources: Vec<String>,
    pub generator: Option<SynthParams>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub n_joints: usize,
    pub sequences: Vec<SkeletonSequence>,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn n_classes(&self) -> usize {
        self.manifest.class_names.len()
    }

    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.manifest.train,
            Split::Val => &self.manifest.val,
        }
    }

    /// Checks every structural invariant of the dataset.
    pub fn validate(&self) -> Result<()> {
        let n_seq = self.sequences.len();
        let k = self.n_classes();
        if k < 2 {
            return Err(Error::Data(format!("dataset has {k} classes; at least 2 are required")));
        }
        for (i, s) in self.sequences.iter().enumerate() {
            let shape = s.frames.shape();
            if shape.len() != 3 || shape[1] != self.n_joints || shape[2] != CHANNELS {
                return Err(Error::Data(format!(
                    "sequence {i} has shape {shape:?}, expected (T, {}, {CHANNELS})",
                    self.n_joints
                )));
            }
            if s.n_frames() == 0 {
                return Err(Error::Data(format!("sequence {i} has no frames")));
            }
            if s.label >= k {
                return Err(Error::Data(format!("sequence {i} has label {} but only {k} classes", s.label)));
            }
            if let Some(p) = s.frames.first_non_finite() {
                return Err(Error::Data(format!("sequence {i} has a non-finite coordinate at {p}")));
            }
        }
        if self.manifest.sources.len() != n_seq {
            return Err(Error::Data("manifest source list does not match the sequence count".into()));
        }
        let mut owner = vec![None; n_seq];
        for (split, idx) in [(Split::Train, &self.manifest.train), (Split::Val, &self.manifest.val)] {
            for &i in idx {
                if i >= n_seq {
                    return Err(Error::Data(format!("{split} split index {i} out of range")));
                }
                if owner[i].replace(split).is_some() {
                    return Err(Error::Data(format!("sequence {i} appears twice in the splits")));
                }
            }
            for c in 0..k {
                if !idx.iter().any(|&i| self.sequences[i].label == c) {
                    return Err(Error::Data(format!("class {c} missing from the {split} split")));
                }
            }
        }
        Ok(())
    }

    /// Stacks sequences into a `(B, 3, T, N)` network input, harmonizing every
    /// clip to `frames` first.
    pub fn batch<T: Scalar>(&self, indices: &[usize], frames: usize) -> Result<(Tensor<T>, Vec<usize>)> {
        let (n, c) = (self.n_joints, CHANNELS);
        let mut data = Vec::with_capacity(indices.len() * c * frames * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let seq = self.sequences.get(i).ok_or_else(|| Error::Data(format!("sequence {i} out of range")))?;
            let clip = harmonize(&seq.frames, frames)?;
            let v = clip.data();
            for ch in 0..c {
                for t in 0..frames {
                    for j in 0..n {
                        data.push(T::lit(v[(t * n + j) * c + ch] as f64));
                    }
                }
            }
            labels.push(seq.label);
        }
        Ok((Tensor::new(vec![indices.len(), c, frames, n], data)?, labels))
    }
}

/// Brings a `(T, N, C)` clip to exactly `target` frames: longer clips keep
/// their centered window (the extra frame goes to the end when the surplus is
/// odd), shorter clips repeat their first and last frames on either side
/// (the extra copy goes to the end).
pub fn harmonize(frames: &Tensor<f32>, target: usize) -> Result<Tensor<f32>> {
    let shape = frames.shape();
    if shape.len() != 3 || shape[0] == 0 {
        return Err(Error::Data(format!("cannot harmonize a clip of shape {shape:?}")));
    }
    if target == 0 {
        return Err(Error::config("target frame count must be positive"));
    }
    let (t, row) = (shape[0], shape[1] * shape[2]);
    if t == target {
        return Ok(frames.clone());
    }
    let src = |tt: usize| &frames.data()[tt * row..][..row];
    let mut out = Vec::with_capacity(target * row);
    if t > target {
        let start = (t - target) / 2;
        for tt in start..start + target {
            out.extend_from_slice(src(tt));
        }
    } else {
        let before = (target - t) / 2;
        for k in 0..target {
            let tt = k.saturating_sub(before).min(t - 1);
            out.extend_from_slice(src(tt));
        }
    }
    Tensor::new(vec![target, shape[1], shape[2]], out)
}
