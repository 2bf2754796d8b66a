//! Binary checkpoints of a training run.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MTANCKPT"  u32 version  u32 len + UTF-8 config echo
//! u32 tensor count
//! per tensor: u32 len + UTF-8 name, u32 rank, rank x u32 dims, f64 data
//! ```
//!
//! Parameters, BN running statistics, Adam moments, the DWA loss history and
//! the step counter are all stored as named tensors, so a restored run picks
//! up exactly where the saved one stopped.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use crate::model::MtanModel;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;
use crate::weighting::DwaState;

pub const MAGIC: &[u8; 8] = b"MTANCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u32),
    #[error("checkpoint truncated at byte {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("tensor {name:?} has dimensions {dims:?} whose size overflows")]
    DimensionOverflow { name: String, dims: Vec<u32> },
    #[error("checkpoint has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("invalid UTF-8 in checkpoint string at byte {0}")]
    Utf8(usize),
    #[error("checkpoint is missing tensor {0:?}")]
    Missing(String),
    #[error("checkpoint tensor {name:?} has shape {got:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("checkpoint holds {0} which this run does not expect")]
    Unexpected(String),
    #[error("value too large for the checkpoint format: {0}")]
    TooLarge(String),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] io::Error),
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Canonical text of the run configuration.
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| CheckpointError::TooLarge(format!("{what} = {v}")))
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn take(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| CheckpointError::Missing(name.to_owned()))
    }

    fn take_shaped(&self, name: &str, dims: &[usize]) -> Result<&Tensor> {
        let t = self.take(name)?;
        if t.dims() != dims {
            return Err(CheckpointError::Shape {
                name: name.to_owned(),
                expected: dims.to_vec(),
                got: t.dims().to_vec(),
            });
        }
        Ok(t)
    }

    fn take_vec(&self, name: &str, len: usize) -> Result<Vec<f64>> {
        Ok(self.take_shaped(name, &[len])?.data().to_vec())
    }

    fn take_count(&self, name: &str) -> Result<u64> {
        let v = self.take_shaped(name, &[1])?.data()[0];
        if !(v >= 0.0 && v.fract() == 0.0 && v < 2f64.powi(53)) {
            return Err(CheckpointError::Unexpected(format!("non-integer counter {name} = {v}")));
        }
        Ok(v as u64)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let put_str = |out: &mut Vec<u8>, s: &str| -> Result<()> {
            out.extend_from_slice(&u32_of(s.len(), "string length")?.to_le_bytes());
            out.extend_from_slice(s.as_bytes());
            Ok(())
        };
        put_str(&mut out, &self.config)?;
        out.extend_from_slice(&u32_of(self.tensors.len(), "tensor count")?.to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name)?;
            out.extend_from_slice(&u32_of(t.dims().len(), "rank")?.to_le_bytes());
            for &d in t.dims() {
                out.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let config = r.string()?;
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<u32>>>()?;
            let numel = dims
                .iter()
                .try_fold(1usize, |n, &d| n.checked_mul(d as usize))
                .filter(|n| n.checked_mul(8).is_some())
                .ok_or_else(|| CheckpointError::DimensionOverflow {
                    name: name.clone(),
                    dims: dims.clone(),
                })?;
            let raw = r.take(numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let tensor = Tensor::new(dims.iter().map(|&d| d as usize).collect::<Vec<_>>(), data).map_err(|_| {
                CheckpointError::DimensionOverflow {
                    name: name.clone(),
                    dims: dims.clone(),
                }
            })?;
            tensors.push((name, tensor));
        }
        if r.at != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.at));
        }
        Ok(Checkpoint { config, tensors })
    }

    /// Write via a temporary file and rename, so an interrupted save never
    /// clobbers the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.at;
        if n > left {
            return Err(CheckpointError::Truncated {
                offset: self.at,
                needed: n - left,
            });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let start = self.at;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| CheckpointError::Utf8(start))
    }
}

/// Everything a training run needs to continue.
#[derive(Clone, Debug)]
pub struct RunState {
    pub model: MtanModel,
    pub adam: Adam,
    pub dwa: Option<DwaState>,
    /// Completed training steps.
    pub step: u64,
}

fn vector(v: &[f64]) -> Tensor {
    Tensor::new(vec![v.len()], v.to_vec()).expect("1-D tensor")
}

fn counter(v: u64) -> Tensor {
    Tensor::scalar(v as f64)
}

impl RunState {
    pub fn to_checkpoint(&self, config: String) -> Checkpoint {
        let mut tensors = Vec::new();
        tensors.push(("step".to_owned(), counter(self.step)));
        for (name, _, value) in self.model.params().iter() {
            tensors.push((format!("param/{name}"), value.clone()));
        }
        for s in self.model.bn_stats() {
            tensors.push((format!("bn/{}/mean", s.name), vector(&s.mean)));
            tensors.push((format!("bn/{}/var", s.name), vector(&s.var)));
        }
        tensors.push(("adam/step".to_owned(), counter(self.adam.steps())));
        let moments = self.adam.first_moments().iter().zip(self.adam.second_moments());
        for ((name, _, _), (m, v)) in self.model.params().iter().zip(moments) {
            tensors.push((format!("adam/m/{name}"), vector(m)));
            tensors.push((format!("adam/v/{name}"), vector(v)));
        }
        if let Some(d) = &self.dwa {
            tensors.push(("dwa/epochs".to_owned(), counter(d.epochs)));
            tensors.push(("dwa/sums".to_owned(), vector(&d.sums)));
            let counts: Vec<f64> = d.counts.iter().map(|&c| c as f64).collect();
            tensors.push(("dwa/counts".to_owned(), vector(&counts)));
            tensors.push(("dwa/w".to_owned(), vector(&d.w)));
            tensors.push(("dwa/lambda".to_owned(), vector(&d.lambda)));
            if let Some(l) = &d.last {
                tensors.push(("dwa/last".to_owned(), vector(l)));
            }
            if let Some(b) = &d.before_last {
                tensors.push(("dwa/before_last".to_owned(), vector(b)));
            }
        }
        Checkpoint { config, tensors }
    }

    /// Overwrite `fresh`, a newly built state for the same configuration,
    /// with the contents of `ckpt`.
    pub fn restore(mut fresh: RunState, ckpt: &Checkpoint) -> Result<RunState> {
        fresh.step = ckpt.take_count("step")?;
        let names: Vec<String> = fresh.model.params().names().map(str::to_owned).collect();
        for name in &names {
            let dims = fresh.model.params().get(name).expect("own parameter").dims().to_vec();
            let t = ckpt.take_shaped(&format!("param/{name}"), &dims)?;
            fresh.model.params_mut().set(name, t.clone()).expect("shape checked");
        }
        for s in fresh.model.bn_stats_mut() {
            s.mean = ckpt.take_vec(&format!("bn/{}/mean", s.name), s.mean.len())?;
            s.var = ckpt.take_vec(&format!("bn/{}/var", s.name), s.var.len())?;
        }

        let sizes: Vec<usize> = fresh.adam.first_moments().iter().map(Vec::len).collect();
        let mut m = Vec::with_capacity(sizes.len());
        let mut v = Vec::with_capacity(sizes.len());
        for (name, &n) in names.iter().zip(&sizes) {
            m.push(ckpt.take_vec(&format!("adam/m/{name}"), n)?);
            v.push(ckpt.take_vec(&format!("adam/v/{name}"), n)?);
        }
        let config: AdamConfig = fresh.adam.config();
        fresh.adam = Adam::from_parts(config, m, v, ckpt.take_count("adam/step")?)
            .map_err(|e| CheckpointError::Unexpected(e.to_string()))?;

        match &mut fresh.dwa {
            Some(d) => {
                let k = d.num_tasks();
                d.epochs = ckpt.take_count("dwa/epochs")?;
                d.sums = ckpt.take_vec("dwa/sums", k)?;
                d.counts = ckpt.take_vec("dwa/counts", k)?.iter().map(|&c| c as u64).collect();
                d.w = ckpt.take_vec("dwa/w", k)?;
                d.lambda = ckpt.take_vec("dwa/lambda", k)?;
                let optional = |name: &str| match ckpt.get(name) {
                    Some(_) => ckpt.take_vec(name, k).map(Some),
                    None => Ok(None),
                };
                d.last = optional("dwa/last")?;
                d.before_last = optional("dwa/before_last")?;
            }
            None if ckpt.get("dwa/epochs").is_some() => {
                return Err(CheckpointError::Unexpected("DWA state".into()));
            }
            None => {}
        }
        Ok(fresh)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config: "model.variant = mtan\n".into(),
            tensors: vec![
                ("a".into(), Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.0, f64::MIN_POSITIVE, 0.0, -0.0]).unwrap()),
                ("scalar".into(), Tensor::scalar(7.0)),
                ("empty".into(), Tensor::new(vec![0, 4], vec![]).unwrap()),
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::decode(&c.encode().unwrap()).unwrap();
        assert_eq!(back.config, c.config);
        for ((n1, t1), (n2, t2)) in c.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(t1.dims(), t2.dims());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1), bits(t2));
        }
    }

    #[test]
    fn every_truncation_is_reported() {
        let bytes = sample().encode().unwrap();
        for cut in MAGIC.len()..bytes.len() {
            assert!(
                matches!(Checkpoint::decode(&bytes[..cut]), Err(CheckpointError::Truncated { .. })),
                "cut at {cut}"
            );
        }
        assert!(matches!(Checkpoint::decode(&bytes[..3]), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn header_errors_are_distinct() {
        let mut bytes = sample().encode().unwrap();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bytes), Err(CheckpointError::BadMagic)));
        let mut bytes = sample().encode().unwrap();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(Checkpoint::decode(&bytes), Err(CheckpointError::Version(2))));
        let mut bytes = sample().encode().unwrap();
        bytes.push(0);
        assert!(matches!(Checkpoint::decode(&bytes), Err(CheckpointError::TrailingBytes(1))));
    }

    #[test]
    fn huge_dimensions_overflow() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(b'x');
        bytes.extend_from_slice(&4u32.to_le_bytes());
        for _ in 0..4 {
            bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(
            Checkpoint::decode(&bytes),
            Err(CheckpointError::DimensionOverflow { .. })
        ));
    }

    #[test]
    fn save_and_load_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        sample().save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap().encode().unwrap(), sample().encode().unwrap());
        assert!(!dir.path().join("c.bin.tmp").exists());
    }
}
