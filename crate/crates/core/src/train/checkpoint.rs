//! Binary checkpoint container: model parameters, optimizer moments, the
//! step counter, the training seed and the configuration digest, guarded
//! by a trailing SHA-256 so truncation or corruption is caught at load.
//! Save → load → save is bit-identical, and a resumed run reproduces an
//! uninterrupted one exactly because every per-step random stream is
//! derived from `(seed, label, step)`.

use crate::error::{Error, Result};
use crate::model::{layer_specs, ModelDims, ModelParams, ParamTensor};
use crate::opt::AdamW;
use crate::train::config::ExperimentConfig;
use sha2::{Digest, Sha256};
use std::path::Path;

const MAGIC: &[u8; 8] = b"TMCKPT01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    /// Steps completed; a resume continues at this step.
    pub step: u64,
    /// The training seed — the complete random state of a run, since all
    /// per-step streams are re-derived from it.
    pub rng_seed: u64,
    pub config_hash: [u8; 32],
    pub params: ModelParams,
    pub opt: AdamW,
}

impl Checkpoint {
    /// Reject use of this checkpoint under a configuration other than the
    /// one that produced it.
    pub fn compatible_with(&self, cfg: &ExperimentConfig) -> Result<()> {
        if self.params.dims != cfg.model {
            return Err(Error::Shape(format!(
                "checkpoint dims {:?} do not match configured model dims {:?}",
                self.params.dims, cfg.model
            )));
        }
        if self.config_hash != cfg.config_hash()? {
            return Err(Error::Container(
                "checkpoint was produced under a different configuration".into(),
            ));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng_seed.to_le_bytes());
        let d = &self.params.dims;
        for v in [d.view_size, d.hidden, d.feature, d.text_embed, d.vocab, d.align, d.repr] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.params.tensors.len() as u32).to_le_bytes());
        for t in &self.params.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.rows as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols as u64).to_le_bytes());
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.opt.t.to_le_bytes());
        for v in [self.opt.beta1, self.opt.beta2, self.opt.eps] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.opt.m.len() as u32).to_le_bytes());
        for moments in [&self.opt.m, &self.opt.v] {
            for arr in moments {
                out.extend_from_slice(&(arr.len() as u64).to_le_bytes());
                for v in arr {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let digest: [u8; 32] = Sha256::digest(&out).into();
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 {
            return Err(Error::Container("checkpoint file too short".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 32);
        let digest: [u8; 32] = Sha256::digest(body).into();
        if digest != tail {
            return Err(Error::Container(
                "checkpoint checksum mismatch (truncated or corrupted file)".into(),
            ));
        }
        let mut c = Cursor { buf: body, pos: 0 };
        let magic = c.take(8)?;
        if magic != MAGIC {
            return Err(Error::Container("not a checkpoint file (bad magic)".into()));
        }
        let version = c.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Container(format!(
                "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let mut config_hash = [0u8; 32];
        config_hash.copy_from_slice(c.take(32)?);
        let step = c.u64()?;
        let rng_seed = c.u64()?;
        let mut dim = [0usize; 7];
        for d in dim.iter_mut() {
            *d = c.u64()? as usize;
        }
        let dims = ModelDims {
            view_size: dim[0],
            hidden: dim[1],
            feature: dim[2],
            text_embed: dim[3],
            vocab: dim[4],
            align: dim[5],
            repr: dim[6],
        };
        let specs = layer_specs(&dims);
        let n_tensors = c.u32()? as usize;
        if n_tensors != specs.len() {
            return Err(Error::Shape(format!(
                "checkpoint stores {n_tensors} tensors, architecture with these dims has {}",
                specs.len()
            )));
        }
        let mut tensors = Vec::with_capacity(n_tensors);
        for (name, rows, cols) in specs {
            let len = c.u32()? as usize;
            let stored = std::str::from_utf8(c.take(len)?)
                .map_err(|_| Error::Container("tensor name is not UTF-8".into()))?
                .to_string();
            let (r, co) = (c.u64()? as usize, c.u64()? as usize);
            if stored != name || r != rows || co != cols {
                return Err(Error::Shape(format!(
                    "checkpoint tensor {stored} ({r}x{co}) does not match expected {name} ({rows}x{cols})"
                )));
            }
            let data = c.f64s(r * co)?;
            tensors.push(ParamTensor { name: stored, rows: r, cols: co, data });
        }
        let params = ModelParams { dims, tensors };
        let t = c.u64()?;
        let beta1 = c.f64()?;
        let beta2 = c.f64()?;
        let eps = c.f64()?;
        let n_moments = c.u32()? as usize;
        if n_moments != n_tensors {
            return Err(Error::Container(format!(
                "optimizer tracks {n_moments} tensors, model has {n_tensors}"
            )));
        }
        let read_moments = |c: &mut Cursor| -> Result<Vec<Vec<f64>>> {
            let mut out = Vec::with_capacity(n_moments);
            for i in 0..n_moments {
                let len = c.u64()? as usize;
                if len != params.tensors[i].data.len() {
                    return Err(Error::Container(format!(
                        "moment buffer {i} has length {len}, tensor has {}",
                        params.tensors[i].data.len()
                    )));
                }
                out.push(c.f64s(len)?);
            }
            Ok(out)
        };
        let m = read_moments(&mut c)?;
        let v = read_moments(&mut c)?;
        if c.pos != body.len() {
            return Err(Error::Container(format!(
                "{} trailing bytes after checkpoint payload",
                body.len() - c.pos
            )));
        }
        Ok(Self {
            version,
            step,
            rng_seed,
            config_hash,
            params,
            opt: AdamW { beta1, beta2, eps, t, m, v },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Container(format!(
                "checkpoint truncated: wanted {n} bytes at offset {}, {} remain",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}
