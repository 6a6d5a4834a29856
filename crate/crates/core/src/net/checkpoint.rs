//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "STDL"  version:u32  count:u32
//! count × { name_len:u16  name:utf8  rank:u8  dims:u32×rank  dtype:u8  data }
//! ```
//!
//! dtype 0 is 32-bit float. Network parameters use their store names,
//! batch-norm buffers `<layer>.bn.running_mean|running_var`, optimizer
//! moments `<param>.m|.v` plus `adam.t`, and run metadata `meta.*`.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::model::{Arch, NetworkParams};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"STDL";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Ordered named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor<f32>)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "truncated while reading {what} at byte {}",
                    self.pos
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.require(name)?;
        if t.len() != 1 {
            return Err(Error::Checkpoint(format!("{name} should hold one value")));
        }
        Ok(t.item() as f64)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
            let rank = u8::try_from(t.rank())
                .map_err(|_| Error::Checkpoint(format!("rank of {name} exceeds 255")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d)
                    .map_err(|_| Error::Checkpoint(format!("dimension of {name} exceeds u32")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.push(DTYPE_F32);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32("tensor count")?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dims")? as usize);
            }
            let dtype = r.u8("dtype")?;
            if dtype != DTYPE_F32 {
                return Err(Error::Checkpoint(format!(
                    "{name}: unsupported dtype tag {dtype}"
                )));
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?;
            let data = r
                .take(n, &name)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push((name, Tensor::from_vec(shape, data)?));
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                buf.len() - r.pos
            )));
        }
        Ok(Self { entries })
    }

    /// Writes via a temporary file and rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Run metadata stored next to the parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub arch: Arch,
    /// Epochs completed.
    pub epoch: usize,
    /// Optimizer steps completed.
    pub step: usize,
}

pub struct LoadedCheckpoint {
    pub params: NetworkParams<f32>,
    pub adam: Option<Adam<f32>>,
    pub meta: CheckpointMeta,
}

impl NetworkParams<f32> {
    pub fn to_checkpoint(&self, adam: Option<&Adam<f32>>, meta: CheckpointMeta) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.push("meta.scale", Tensor::scalar(self.spec.scale as f32));
        ck.push("meta.d_max", Tensor::scalar(self.d_max as f32));
        ck.push(
            "meta.arch",
            Tensor::scalar(matches!(meta.arch, Arch::Siamese) as u8 as f32),
        );
        ck.push("meta.epoch", Tensor::scalar(meta.epoch as f32));
        ck.push("meta.step", Tensor::scalar(meta.step as f32));
        for id in self.store.ids() {
            ck.push(self.store.name(id), self.store.value(id).clone());
        }
        for (li, l) in self.layers.iter().enumerate() {
            if let Some(bn) = &l.bn {
                let name = self.layer_name(li);
                ck.push(
                    format!("{name}.bn.running_mean"),
                    bn.stats.running_mean.clone(),
                );
                ck.push(
                    format!("{name}.bn.running_var"),
                    bn.stats.running_var.clone(),
                );
            }
        }
        if let Some(adam) = adam {
            ck.push("adam.t", Tensor::scalar(adam.t as f32));
            for id in self.store.ids() {
                let name = self.store.name(id);
                ck.push(format!("{name}.m"), adam.m[id.index()].clone());
                ck.push(format!("{name}.v"), adam.v[id.index()].clone());
            }
        }
        ck
    }

    /// Rebuilds the network described by the checkpoint metadata and fills
    /// every tensor from it. Any missing or mis-shaped tensor is an error.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<LoadedCheckpoint> {
        let scale = ck.scalar("meta.scale")?;
        let d_max = ck.scalar("meta.d_max")?;
        let meta = CheckpointMeta {
            arch: if ck.scalar("meta.arch")? != 0.0 {
                Arch::Siamese
            } else {
                Arch::Basic
            },
            epoch: ck.scalar("meta.epoch")? as usize,
            step: ck.scalar("meta.step")? as usize,
        };
        let mut params = NetworkParams::<f32>::build(scale, d_max, 0)?;
        let fill = |dst: &mut Tensor<f32>, name: &str| -> Result<()> {
            let src = ck.require(name)?;
            if src.shape() != dst.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} does not match network {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.clone_from(src);
            Ok(())
        };
        let ids: Vec<_> = params.store.ids().collect();
        for &id in &ids {
            let name = params.store.name(id).to_string();
            fill(params.store.value_mut(id), &name)?;
        }
        for li in 0..params.layers.len() {
            let name = params.layer_name(li).to_string();
            if let Some(bn) = params.layers[li].bn.as_mut() {
                fill(
                    &mut bn.stats.running_mean,
                    &format!("{name}.bn.running_mean"),
                )?;
                fill(&mut bn.stats.running_var, &format!("{name}.bn.running_var"))?;
            }
        }
        let adam = match ck.get("adam.t") {
            None => None,
            Some(t) => {
                let mut adam = Adam::new(&params.store, AdamConfig::default());
                adam.t = t.item() as u64;
                for &id in &ids {
                    let name = params.store.name(id).to_string();
                    fill(&mut adam.m[id.index()], &format!("{name}.m"))?;
                    fill(&mut adam.v[id.index()], &format!("{name}.v"))?;
                }
                Some(adam)
            }
        };
        Ok(LoadedCheckpoint { params, adam, meta })
    }
}

/// Largest magnitude the checkpoint can hold for integer metadata exactly.
pub const META_EXACT_LIMIT: usize = 1 << f32::MANTISSA_DIGITS;

impl<T: Scalar> NetworkParams<T> {
    /// Converts to single precision and serializes.
    pub fn save(&self, path: &Path, adam: Option<&Adam<f32>>, meta: CheckpointMeta) -> Result<()> {
        self.cast::<f32>().to_checkpoint(adam, meta).save(path)
    }
}
