//! Versioned binary checkpoint.
//!
//! Layout: `b"SPCK"`, `u32` version, `u32` header length, a JSON header
//! (config, dtype, counters, RNG state, parameter names and shapes), then the
//! little-endian parameter values followed by the two optimizer moments, all
//! in parameter order.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adamw::AdamWState;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::real::Real;
use crate::rng::Rng;

const MAGIC: &[u8; 4] = b"SPCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    config: Config,
    epoch: usize,
    rng: Rng,
    opt_step: u64,
    params: Vec<ParamHeader>,
}

/// Scalar type name (`f32` or `f64`) recorded in a checkpoint file.
pub fn checkpoint_dtype(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("{}: not a checkpoint (bad magic)", path.display())));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header = bytes.get(12..12 + hlen).ok_or_else(|| Error::Format(format!("{}: truncated header", path.display())))?;
    #[derive(Deserialize)]
    struct Dtype {
        dtype: String,
    }
    let d: Dtype = serde_json::from_slice(header).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(d.dtype)
}

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub config: Config,
    /// Epochs completed.
    pub epoch: usize,
    pub rng: Rng,
    pub params: ParamStore<T>,
    pub opt: AdamWState<T>,
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            dtype: T::NAME.into(),
            config: self.config.clone(),
            epoch: self.epoch,
            rng: self.rng.clone(),
            opt_step: self.opt.step,
            params: self
                .params
                .params()
                .iter()
                .map(|p| ParamHeader { name: p.name.clone(), shape: p.tensor.shape().to_vec(), trainable: p.trainable })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + 3 * T::BYTES * self.params.count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.params.params() {
            p.tensor.data().iter().for_each(|v| v.write_le(&mut out));
        }
        for moments in [&self.opt.m, &self.opt.v] {
            moments.iter().flatten().for_each(|v| v.write_le(&mut out));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("checkpoint version {version}, this build reads {VERSION}")));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header_end = 12usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| Error::Format("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(&bytes[12..header_end]).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if header.dtype != T::NAME {
            return Err(Error::Format(format!("checkpoint holds {} values, expected {}", header.dtype, T::NAME)));
        }
        let total: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
        let body = &bytes[header_end..];
        if body.len() != 3 * total * T::BYTES {
            return Err(Error::Format(format!(
                "checkpoint body has {} bytes, header implies {}",
                body.len(),
                3 * total * T::BYTES
            )));
        }
        let mut vals = body.chunks_exact(T::BYTES).map(T::read_le);
        let mut params = ParamStore::new();
        for p in &header.params {
            let n = p.shape.iter().product();
            let data: Vec<T> = vals.by_ref().take(n).collect();
            params.add(p.name.clone(), crate::tensor::Tensor::new(p.shape.clone(), data)?, p.trainable);
        }
        let moment = |vals: &mut dyn Iterator<Item = T>| -> Vec<Vec<T>> {
            header.params.iter().map(|p| vals.take(p.shape.iter().product()).collect()).collect()
        };
        let m = moment(&mut vals);
        let v = moment(&mut vals);
        Ok(Self {
            config: header.config,
            epoch: header.epoch,
            rng: header.rng,
            params,
            opt: AdamWState { step: header.opt_step, m, v },
        })
    }

    /// Atomic save: write a sibling temp file, then rename over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Copies saved values into a freshly built store, checking that names
    /// and shapes agree.
    pub fn restore_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (dst, src) in store.params_mut().iter_mut().zip(self.params.params()) {
            if dst.name != src.name || dst.tensor.shape() != src.tensor.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor {} {:?} does not match model tensor {} {:?}",
                    src.name,
                    src.tensor.shape(),
                    dst.name,
                    dst.tensor.shape()
                )));
            }
            dst.tensor = src.tensor.clone();
            dst.trainable = src.trainable;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;
    use crate::rng::{self, streams};
    use crate::tensor::Tensor;
    use rand::Rng as _;

    fn sample() -> Checkpoint<f32> {
        let mut params = ParamStore::new();
        params.add("a", Tensor::new([2, 3], vec![1.0, -2.0, 3.5, 0.0, f32::MIN_POSITIVE, 7.0]).unwrap(), true);
        params.add("b", Tensor::new([1], vec![0.25]).unwrap(), false);
        let mut opt = AdamWState::new(&params);
        opt.step = 3;
        opt.m[0][1] = 0.5;
        opt.v[1][0] = 2.0;
        let mut r = rng::stream(1, streams::SHUFFLE);
        let _: u64 = r.random();
        Checkpoint { config: Config::preset(Preset::Toy), epoch: 2, rng: r, params, opt }
    }

    #[test]
    fn bytes_round_trip_bit_exact() {
        let c = sample();
        let d = Checkpoint::<f32>::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(d.to_bytes(), c.to_bytes());
        assert_eq!(d.params.flatten(), c.params.flatten());
        assert_eq!(d.opt, c.opt);
        assert_eq!(d.rng, c.rng);
        assert!(!d.params.params()[1].trainable);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let b = sample().to_bytes();
        assert!(Checkpoint::<f32>::from_bytes(&b[..b.len() - 1]).is_err());
        assert!(Checkpoint::<f64>::from_bytes(&b).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Checkpoint::<f32>::from_bytes(&bad).is_err());
    }

    #[test]
    fn atomic_save_and_missing_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.spck");
        sample().save(&p).unwrap();
        assert!(!p.with_extension("tmp").exists());
        assert_eq!(Checkpoint::<f32>::load(&p).unwrap().to_bytes(), sample().to_bytes());
        let e = Checkpoint::<f32>::load(&dir.path().join("nope.spck")).unwrap_err().to_string();
        assert!(e.contains("nope.spck"));
    }
}
