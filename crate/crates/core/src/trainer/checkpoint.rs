//! Binary checkpoints: header, config echo, named tensors, optional Adam state.
//!
//! Layout (little endian): `THCK`, u32 version, u8 stage, u64 iteration,
//! u32-length-prefixed TOML config, u32 tensor count, then per tensor a
//! u32-length-prefixed name, u32 ndim, u64 dims and f64 data. A trailing u8
//! flags the Adam block (lr, beta1, beta2, eps, u64 step, then m and v data
//! in tensor order).

use std::io::{Read, Write};
use std::path::Path;

use super::PipelineConfig;
use crate::error::{Error, Result};
use crate::nn::{AdamState, ParamStore, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"THCK";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: u8,
    pub iteration: u64,
    /// Full TOML of the run that wrote it.
    pub config: String,
    pub params: ParamStore,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(stage: u8, iteration: u64, cfg: &PipelineConfig, params: &ParamStore, adam: Option<AdamState>) -> Self {
        Self {
            stage,
            iteration,
            config: cfg.to_toml(),
            params: params.clone(),
            adam,
        }
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig> {
        toml::from_str(&self.config).map_err(|e| Error::Checkpoint(format!("config echo: {e}")))
    }

    /// Fails unless `cfg` builds parameters of the same shapes as this checkpoint.
    pub fn check_model_config(&self, cfg: &PipelineConfig) -> Result<()> {
        let saved = self.pipeline_config()?;
        if saved.recon != cfg.recon || saved.motion != cfg.motion || saved.decoder != cfg.decoder {
            return Err(Error::Checkpoint(format!(
                "model configuration differs from the checkpoint:\n--- checkpoint\n{}--- run\n{}",
                saved.model_echo(),
                cfg.model_echo()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        b.push(self.stage);
        b.extend_from_slice(&self.iteration.to_le_bytes());
        put_str(&mut b, &self.config);
        b.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_str(&mut b, name);
            b.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut b, t.data());
        }
        match &self.adam {
            None => b.push(0),
            Some(a) => {
                b.push(1);
                for x in [a.lr, a.beta1, a.beta2, a.eps] {
                    b.extend_from_slice(&x.to_le_bytes());
                }
                b.extend_from_slice(&a.step.to_le_bytes());
                for t in a.m.iter().chain(&a.v) {
                    put_f64s(&mut b, t.data());
                }
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { b: bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                path: path.into(),
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let stage = r.u8()?;
        if !(1..=2).contains(&stage) {
            return Err(r.bad(format!("invalid stage {stage}")));
        }
        let iteration = r.u64()?;
        let config = r.string()?;
        let n = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(r.bad(format!("tensor `{name}` has {ndim} dimensions")));
            }
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| r.bad(format!("tensor `{name}` is too large")))?;
            let data = r.f64s(numel)?;
            if params.find(&name).is_some() {
                return Err(r.bad(format!("duplicate tensor `{name}`")));
            }
            params.add(name, Tensor::new(shape, data)?);
        }
        let adam = match r.u8()? {
            0 => None,
            1 => {
                let lr = r.f64()?;
                let beta1 = r.f64()?;
                let beta2 = r.f64()?;
                let eps = r.f64()?;
                let step = r.u64()?;
                let shapes: Vec<Vec<usize>> = params.iter().map(|(_, t)| t.shape().to_vec()).collect();
                let read_all = |r: &mut Reader| -> Result<Vec<Tensor>> {
                    shapes
                        .iter()
                        .map(|s| Tensor::new(s.clone(), r.f64s(s.iter().product())?))
                        .collect()
                };
                let m = read_all(&mut r)?;
                let v = read_all(&mut r)?;
                Some(AdamState {
                    lr,
                    beta1,
                    beta2,
                    eps,
                    step,
                    m,
                    v,
                })
            }
            f => return Err(r.bad(format!("invalid optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(r.bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let ckpt = Self {
            stage,
            iteration,
            config,
            params,
            adam,
        };
        ckpt.pipeline_config()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s.as_bytes());
}

fn put_f64s(b: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        b.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn bad(&self, reason: String) -> Error {
        Error::format(self.path, reason)
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len());
        let end = end.ok_or_else(|| self.bad(format!("truncated at byte {}", self.pos)))?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
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
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| self.bad("tensor size overflows".into()))?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?.to_vec();
        String::from_utf8(raw).map_err(|_| self.bad("string is not UTF-8".into()))
    }
}
