//! `SKDS` dataset files.
//!
//! ```text
//! "SKDS" | u32 version=1 | u32 N | u32 C | u32 n_sequences
//! per sequence: u32 T | u32 label | T·N·C × f32
//! u32 byte length | UTF-8 JSON manifest
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use super::data::{Dataset, DatasetManifest, SkeletonSequence, CHANNELS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"SKDS";
pub const DATASET_VERSION: u32 = 1;

/// Little-endian reader that reports byte offsets in its errors.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn error(&self, msg: impl Into<String>) -> Error {
        Error::Format { offset: self.offset(), msg: msg.into() }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.error(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let start = self.pos;
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(Error::Format {
                offset: start as u64,
                msg: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expected)
                ),
            });
        }
        Ok(())
    }

    pub(crate) fn version(&mut self, expected: u32) -> Result<()> {
        let start = self.pos;
        let v = self.u32("version")?;
        if v != expected {
            return Err(Error::Format { offset: start as u64, msg: format!("unsupported version {v}, expected {expected}") });
        }
        Ok(())
    }

    /// u32 length followed by that many UTF-8 bytes.
    pub(crate) fn string(&mut self, what: &str) -> Result<&'a str> {
        let len = self.u32(what)? as usize;
        let start = self.pos;
        let bytes = self.take(len, what)?;
        std::str::from_utf8(bytes)
            .map_err(|e| Error::Format { offset: start as u64, msg: format!("{what} is not UTF-8: {e}") })
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.error(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Data(format!("{v} does not fit in a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub(crate) fn put_string(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    put_u32(&mut out, DATASET_VERSION as usize)?;
    put_u32(&mut out, ds.n_joints)?;
    put_u32(&mut out, CHANNELS)?;
    put_u32(&mut out, ds.sequences.len())?;
    for s in &ds.sequences {
        put_u32(&mut out, s.n_frames())?;
        put_u32(&mut out, s.label)?;
        for v in s.frames.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    put_string(&mut out, &serde_json::to_string(&ds.manifest)?)?;
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    r.version(DATASET_VERSION)?;
    let n = r.u32("joint count")? as usize;
    let c_at = r.offset();
    let c = r.u32("channel count")? as usize;
    if c != CHANNELS {
        return Err(Error::Format { offset: c_at, msg: format!("channel count {c}, expected {CHANNELS}") });
    }
    let count = r.u32("sequence count")? as usize;
    let mut raw = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        let t = r.u32("frame count")? as usize;
        let label = r.u32("label")? as usize;
        let len = t
            .checked_mul(n * c)
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| r.error(format!("sequence {i} size overflows")))?;
        let data = r
            .take(len, &format!("frames of sequence {i}"))?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect::<Vec<_>>();
        raw.push((t, label, data));
    }
    let manifest_at = r.offset();
    let manifest: DatasetManifest = serde_json::from_str(r.string("manifest")?)
        .map_err(|e| Error::Format { offset: manifest_at, msg: format!("manifest: {e}") })?;
    r.finish()?;
    if manifest.sources.len() != count {
        return Err(Error::Format {
            offset: manifest_at,
            msg: format!("manifest lists {} sources for {count} sequences", manifest.sources.len()),
        });
    }
    let sequences = raw
        .into_iter()
        .zip(&manifest.sources)
        .map(|((t, label, data), source)| {
            Ok(SkeletonSequence { frames: Tensor::new(vec![t, n, c], data)?, label, source: source.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = Dataset { n_joints: n, sequences, manifest };
    ds.validate().map_err(|e| Error::Format { offset: manifest_at, msg: e.to_string() })?;
    Ok(ds)
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    std::fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{generate_synthetic, SkeletonGraph, SynthParams};

    fn sample() -> Dataset {
        let g = SkeletonGraph::builtin("star9").unwrap();
        generate_synthetic(&g, &SynthParams::new(2, 4, 8, 0.2, 3)).unwrap()
    }

    #[test]
    fn round_trip_is_identity() {
        let ds = sample();
        let bytes = encode_dataset(&ds).unwrap();
        let back = decode_dataset(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(encode_dataset(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupt_magic_is_a_format_error() {
        let mut bytes = encode_dataset(&sample()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_dataset(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn version_mismatch_reports_offset_4() {
        let mut bytes = encode_dataset(&sample()).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode_dataset(&bytes), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn truncation_is_a_format_error() {
        let bytes = encode_dataset(&sample()).unwrap();
        for cut in [3, 10, 30, bytes.len() - 1] {
            let err = decode_dataset(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "cut {cut}: {err}");
        }
    }

    #[test]
    fn variable_length_sequences_are_accepted() {
        let mut ds = sample();
        let s = &mut ds.sequences[1];
        s.frames = Tensor::new(vec![5, 9, 3], s.frames.data()[..5 * 27].to_vec()).unwrap();
        let back = decode_dataset(&encode_dataset(&ds).unwrap()).unwrap();
        assert_eq!(back.sequences[1].n_frames(), 5);
        let (x, _) = back.batch::<f32>(&[0, 1], 8).unwrap();
        assert_eq!(x.shape(), &[2, 3, 8, 9]);
        // Edge padding: last padded frames of clip 1 repeat its frame 4.
        let at = |t: usize| x.at(&[1, 0, t, 2]);
        assert_eq!(at(7), at(6));
    }
}
