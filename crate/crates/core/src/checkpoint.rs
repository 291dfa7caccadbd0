//! Binary checkpoints of a model and its lookup table.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "DVAT"  version:u32
//! hyper_words:u32  hyper_words × u64      (integers, f64 bit patterns, keyword codes)
//! arrays:u32  then per array:  name_len:u32 name  values:u64  values × f64
//! checksum:u64
//! ```
//!
//! The checksum is the wrapping sum of every hyperparameter word and every
//! value bit pattern. Array names and lengths are checked against the layout
//! implied by the hyperparameters, so damage outside the summed words is
//! caught as a format error.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Hyperparams, Keyword, ModelParams, SpatialMode, Weights};
use crate::oim::{LossKind, OimState};
use crate::spatial::PenaltyKind;
use crate::temporal::{TemporalMode, TemporalNorm};

pub const MAGIC: &[u8; 4] = b"DVAT";
pub const VERSION: u32 = 1;
const TABLE: &str = "oim.table";
const NO_DROP: u64 = u64::MAX;

fn code<T: Keyword + PartialEq>(v: T) -> u64 {
    T::ALL.iter().position(|x| *x == v).unwrap() as u64
}

fn from_code<T: Keyword>(c: u64, what: &str) -> Result<T> {
    T::ALL
        .get(c as usize)
        .copied()
        .ok_or_else(|| Error::Format(format!("unknown {what} code {c}")))
}

fn hyper_words(h: &Hyperparams) -> Vec<u64> {
    vec![
        h.frames as u64,
        h.heads as u64,
        h.grid_height as u64,
        h.grid_width as u64,
        h.feature_dim as u64,
        h.hidden_dim as u64,
        h.embed_dim as u64,
        h.classes as u64,
        h.lambda_div.to_bits(),
        code(h.penalty),
        code(h.spatial_mode),
        h.enhancement as u64,
        h.sigma.to_bits(),
        code(h.temporal_mode),
        code(h.temporal_norm),
        code(h.loss),
        h.temperature.to_bits(),
        h.oim_momentum.to_bits(),
        h.lr.to_bits(),
        h.lr_final.to_bits(),
        h.lr_drop_epoch.map_or(NO_DROP, |e| e as u64),
        h.sgd_momentum.to_bits(),
        h.warmup_epochs as u64,
        h.seed,
        h.epochs as u64,
        h.batch_size as u64,
    ]
}

const HYPER_WORDS: usize = 26;

fn hyper_from(w: &[u64]) -> Result<Hyperparams> {
    let size = |i: usize| usize::try_from(w[i]).map_err(|_| Error::Format(format!("word {i} too large")));
    let h = Hyperparams {
        frames: size(0)?,
        heads: size(1)?,
        grid_height: size(2)?,
        grid_width: size(3)?,
        feature_dim: size(4)?,
        hidden_dim: size(5)?,
        embed_dim: size(6)?,
        classes: size(7)?,
        lambda_div: f64::from_bits(w[8]),
        penalty: from_code::<PenaltyKind>(w[9], "penalty")?,
        spatial_mode: from_code::<SpatialMode>(w[10], "spatial mode")?,
        enhancement: match w[11] {
            0 => false,
            1 => true,
            c => return Err(Error::Format(format!("bad enhancement flag {c}"))),
        },
        sigma: f64::from_bits(w[12]),
        temporal_mode: from_code::<TemporalMode>(w[13], "temporal mode")?,
        temporal_norm: from_code::<TemporalNorm>(w[14], "temporal norm")?,
        loss: from_code::<LossKind>(w[15], "loss")?,
        temperature: f64::from_bits(w[16]),
        oim_momentum: f64::from_bits(w[17]),
        lr: f64::from_bits(w[18]),
        lr_final: f64::from_bits(w[19]),
        lr_drop_epoch: if w[20] == NO_DROP { None } else { Some(size(20)?) },
        sgd_momentum: f64::from_bits(w[21]),
        warmup_epochs: size(22)?,
        seed: w[23],
        epochs: size(24)?,
        batch_size: size(25)?,
    };
    h.validate().map_err(|e| Error::Format(format!("stored hyperparameters invalid: {e}")))?;
    Ok(h)
}

pub fn save(params: &ModelParams, state: &OimState) -> Result<Vec<u8>> {
    let h = &params.hyper;
    if state.table.shape() != (h.classes, h.embed_dim) {
        return Err(Error::shape("lookup table does not match the hyperparameters"));
    }
    let mut out = Vec::new();
    let mut sum = 0u64;
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let words = hyper_words(h);
    out.extend_from_slice(&(words.len() as u32).to_le_bytes());
    for w in words {
        sum = sum.wrapping_add(w);
        out.extend_from_slice(&w.to_le_bytes());
    }
    let mut arrays = params.weights.arrays();
    arrays.push((TABLE.to_string(), state.table.as_slice()));
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, values) in arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            sum = sum.wrapping_add(v.to_bits());
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load(bytes: &[u8]) -> Result<(ModelParams, OimState)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    if r.u32()? as usize != HYPER_WORDS {
        return Err(Error::Format("unexpected hyperparameter block size".into()));
    }
    let mut sum = 0u64;
    let words = (0..HYPER_WORDS).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    for &w in &words {
        sum = sum.wrapping_add(w);
    }
    let hyper = hyper_from(&words);

    // Values are read and summed before the hyperparameters are trusted, so a
    // damaged hyperparameter word is reported as a checksum mismatch.
    let count = r.u32()? as usize;
    let mut arrays: Vec<(String, Vec<f64>)> = Vec::new();
    for _ in 0..count.min(bytes.len()) {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Format("array name is not UTF-8".into()))?;
        let n = usize::try_from(r.u64()?).map_err(|_| Error::Format("array too long".into()))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("array too long".into()))?)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| {
                let bits = u64::from_le_bytes(c.try_into().unwrap());
                sum = sum.wrapping_add(bits);
                f64::from_bits(bits)
            })
            .collect();
        arrays.push((name, values));
    }
    let stored = r.u64()?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if stored != sum {
        return Err(Error::Checksum { stored, computed: sum });
    }
    let hyper = hyper?;

    let mut weights = Weights::zeros(&hyper);
    let mut state = OimState::new(hyper.classes, hyper.embed_dim, hyper.temperature, hyper.oim_momentum)
        .map_err(|e| Error::Format(e.to_string()))?;
    {
        let mut slots = weights.arrays_mut();
        slots.push((TABLE.to_string(), state.table.as_mut_slice()));
        if slots.len() != arrays.len() {
            return Err(Error::Format(format!(
                "expected {} arrays, found {}",
                slots.len(),
                arrays.len()
            )));
        }
        for ((name, slot), (stored_name, values)) in slots.into_iter().zip(arrays) {
            if name != stored_name || slot.len() != values.len() {
                return Err(Error::Format(format!(
                    "array `{stored_name}` ({} values) where `{name}` ({} values) belongs",
                    values.len(),
                    slot.len()
                )));
            }
            slot.copy_from_slice(&values);
        }
    }
    Ok((ModelParams { hyper, weights }, state))
}

pub fn write(path: &Path, params: &ModelParams, state: &OimState) -> Result<()> {
    std::fs::write(path, save(params, state)?)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<(ModelParams, OimState)> {
    load(&std::fs::read(path)?)
}
