//! Single-file training snapshot.
//!
//! Layout, little-endian: `"DCRF"`, version `u32`, config length `u32` and
//! UTF-8 TOML bytes, entry count `u32`, then per entry: name length `u32`,
//! name bytes, value count `u64`, values as `f64`.

use std::collections::BTreeMap;
use std::path::Path;

use dcrf::data::write_atomic;
use dcrf::{AnyUnary, OptimState, PairwiseModel, ParamTensor, UnaryProvider};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"DCRF";
pub const VERSION: u32 = 1;

const UNARY: &str = "unary/";
const CRF: &str = "crf/";
const VELOCITY: &str = "velocity/";
const STAGE: &str = "meta/stage";
const EPOCH: &str = "meta/epoch";
const STEP: &str = "meta/step";
const BEST: &str = "meta/best_val_miou";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Unary scorer alone, CRF switched off.
    Unary,
    /// Unary scorer and CRF together.
    Joint,
}

impl Stage {
    fn code(self) -> f64 {
        match self {
            Stage::Unary => 0.0,
            Stage::Joint => 1.0,
        }
    }

    fn from_code(v: f64) -> Option<Self> {
        match v {
            0.0 => Some(Stage::Unary),
            1.0 => Some(Stage::Joint),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Unary => "unary",
            Stage::Joint => "joint",
        }
    }
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub stage: Stage,
    /// Completed epochs within `stage`.
    pub epoch: u64,
    /// Optimizer steps taken across all stages.
    pub step: u64,
    /// Best validation mean IoU so far in `stage`, NaN when unknown.
    pub best_val_miou: f64,
    pub unary: AnyUnary,
    pub model: PairwiseModel,
    pub optimizer: OptimState,
}

impl Checkpoint {
    /// Whether inference should run the CRF.
    pub fn uses_crf(&self) -> bool {
        self.stage == Stage::Joint && self.config.crf.enabled
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries: Vec<(String, Vec<f64>)> = Vec::new();
        for p in self.unary.params() {
            entries.push((format!("{UNARY}{}", p.name), p.values));
        }
        for p in self.model.params() {
            entries.push((format!("{CRF}{}", p.name), p.values));
        }
        for (name, v) in self.optimizer.velocities() {
            entries.push((format!("{VELOCITY}{name}"), v.clone()));
        }
        entries.push((STAGE.into(), vec![self.stage.code()]));
        entries.push((EPOCH.into(), vec![self.epoch as f64]));
        entries.push((STEP.into(), vec![self.step as f64]));
        entries.push((BEST.into(), vec![self.best_val_miou]));

        let config = self.config.to_toml();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, values) in entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        Ok(write_atomic(path, &self.to_bytes())?)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| dcrf::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_bytes(&bytes).map_err(|reason| CliError::Checkpoint {
            path: path.display().to_string(),
            reason,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("missing DCRF magic".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|e| format!("config text: {e}"))?;
        let config = RunConfig::parse(text).map_err(|e| e.to_string())?;
        let count = r.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let at = r.pos;
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| format!("entry name at byte {at} is not UTF-8"))?
                .to_string();
            let n = r.u64()? as usize;
            let raw = r.take(n.checked_mul(8).ok_or("entry length overflows")?)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if entries.insert(name.clone(), values).is_some() {
                return Err(format!("duplicate entry {name}"));
            }
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }

        let mut unary = config.build_unary();
        let params = fill(unary.params(), UNARY, &mut entries)?;
        unary.set_params(&params).map_err(|e| e.to_string())?;
        let mut model = config.build_model().map_err(|e| e.to_string())?;
        let params = fill(model.params(), CRF, &mut entries)?;
        model.set_params(&params).map_err(|e| e.to_string())?;
        let mut optimizer = OptimState::new(config.optim_config()).map_err(|e| e.to_string())?;
        let scalar = |entries: &mut BTreeMap<String, Vec<f64>>, key: &str| -> Result<f64, String> {
            match entries.remove(key).as_deref() {
                Some([v]) => Ok(*v),
                _ => Err(format!("missing scalar {key}")),
            }
        };
        let stage = Stage::from_code(scalar(&mut entries, STAGE)?).ok_or("unknown stage code")?;
        let epoch = scalar(&mut entries, EPOCH)? as u64;
        let step = scalar(&mut entries, STEP)? as u64;
        let best_val_miou = scalar(&mut entries, BEST)?;
        for (name, values) in entries {
            match name.strip_prefix(VELOCITY) {
                Some(p) => optimizer.set_velocity(p, values),
                None => return Err(format!("unexpected entry {name}")),
            }
        }
        Ok(Checkpoint {
            config,
            stage,
            epoch,
            step,
            best_val_miou,
            unary,
            model,
            optimizer,
        })
    }
}

/// Replaces each tensor's values with the entry `<prefix><name>`.
fn fill(
    mut params: Vec<ParamTensor>,
    prefix: &str,
    entries: &mut BTreeMap<String, Vec<f64>>,
) -> Result<Vec<ParamTensor>, String> {
    for p in &mut params {
        let key = format!("{prefix}{}", p.name);
        let values = entries.remove(&key).ok_or_else(|| format!("missing entry {key}"))?;
        if values.len() != p.values.len() {
            return Err(format!(
                "entry {key} holds {} values, the configured model needs {}",
                values.len(),
                p.values.len()
            ));
        }
        p.values = values;
    }
    Ok(params)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(format!("truncated at byte {}, needed {n} more", self.pos));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
