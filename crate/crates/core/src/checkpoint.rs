//! Binary checkpoints: a config snapshot, a step counter and every named
//! parameter with its shape.
//!
//! Layout (all integers little-endian):
//! magic `RNTF`, version u32, kind (u32 length + utf8), config (u32 length +
//! utf8), step u64, parameter count u32, then per parameter: name (u32 length
//! + utf8), rank u32, dims u64 each, values f64 each.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::lm::RnnLm;
use crate::params::ParamStore;
use crate::rnnt::RnntModel;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RNTF";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct StoredParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// `lm`, or `rnnt:<mode>` for transducers.
    pub kind: String,
    /// Canonical `ExperimentConfig` text.
    pub config: String,
    pub step: u64,
    pub params: Vec<StoredParam>,
}

impl Checkpoint {
    pub fn from_store(kind: impl Into<String>, config: impl Into<String>, step: u64, store: &ParamStore) -> Self {
        Self {
            kind: kind.into(),
            config: config.into(),
            step,
            params: store
                .iter()
                .map(|p| StoredParam {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    values: p.tensor.values().to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        put_str(&mut out, &self.config);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            put_str(&mut out, &p.name);
            out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &p.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        let kind = r.string()?;
        let config = r.string()?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::CorruptCheckpoint(format!("parameter `{name}` has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= r.remaining() / 8)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("truncated values for `{name}`")))?;
            let values = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            params.push(StoredParam { name, shape, values });
        }
        if r.remaining() != 0 {
            return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self {
            kind,
            config,
            step,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Copies stored values into `store`. Every parameter of the store must
    /// be present with the same shape; unknown stored names are rejected.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        for p in &self.params {
            if store.id_of(&p.name).is_none() {
                return Err(Error::CorruptCheckpoint(format!("unexpected parameter `{}`", p.name)));
            }
        }
        let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
        for name in names {
            let stored = self
                .params
                .iter()
                .find(|p| p.name == name)
                .ok_or_else(|| Error::MissingParameter(name.clone()))?;
            let id = store.id_of(&name).expect("name from store");
            let param = store.get_mut(id);
            if param.tensor.shape() != stored.shape.as_slice() {
                return Err(Error::ParameterShape {
                    name,
                    expected: param.tensor.shape().to_vec(),
                    found: stored.shape.clone(),
                });
            }
            param.tensor = Tensor::new(stored.shape.clone(), stored.values.clone())?;
        }
        Ok(())
    }

    pub fn experiment_config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(&self.config)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::CorruptCheckpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::CorruptCheckpoint("invalid utf-8".into()))
    }
}

pub fn rnnt_kind(mode: FusionMode) -> String {
    format!("rnnt:{mode}")
}

pub fn save_rnnt(path: &Path, model: &RnntModel, cfg: &ExperimentConfig, step: u64) -> Result<()> {
    let cfg = ExperimentConfig {
        model: model.config.clone(),
        ..cfg.clone()
    };
    Checkpoint::from_store(rnnt_kind(model.mode()), cfg.to_text(), step, &model.store).save(path)
}

/// Rebuilds the architecture named in the checkpoint and fills in its values.
pub fn rnnt_from_checkpoint(ckpt: &Checkpoint) -> Result<(RnntModel, ExperimentConfig)> {
    let mode: FusionMode = ckpt
        .kind
        .strip_prefix("rnnt:")
        .ok_or_else(|| Error::CorruptCheckpoint(format!("expected a transducer checkpoint, found `{}`", ckpt.kind)))?
        .parse()?;
    let cfg = ckpt.experiment_config()?;
    // values are overwritten below; the generator only fixes shapes
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = RnntModel::new(cfg.model.clone(), mode, &cfg.fusion, &mut rng)?;
    ckpt.restore_into(&mut model.store)?;
    Ok((model, cfg))
}

pub fn load_rnnt(path: &Path) -> Result<(RnntModel, ExperimentConfig, u64)> {
    let ckpt = Checkpoint::load(path)?;
    let (model, cfg) = rnnt_from_checkpoint(&ckpt)?;
    Ok((model, cfg, ckpt.step))
}

pub fn save_lm(path: &Path, lm: &RnnLm, cfg: &ExperimentConfig, step: u64) -> Result<()> {
    let cfg = ExperimentConfig {
        lm: lm.config.clone(),
        ..cfg.clone()
    };
    Checkpoint::from_store("lm", cfg.to_text(), step, &lm.store).save(path)
}

/// Loads an LM; its parameters come back frozen.
pub fn load_lm(path: &Path) -> Result<(RnnLm, ExperimentConfig, u64)> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.kind != "lm" {
        return Err(Error::CorruptCheckpoint(format!("expected an LM checkpoint, found `{}`", ckpt.kind)));
    }
    let cfg = ckpt.experiment_config()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut lm = RnnLm::new(cfg.lm.clone(), &mut rng)?;
    ckpt.restore_into(&mut lm.store)?;
    lm.store.set_trainable(false);
    Ok((lm, cfg, ckpt.step))
}
