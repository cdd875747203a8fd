//! Checkpoint file, little-endian:
//!
//! ```text
//! magic      4 bytes  "IDCK"
//! version    u32      1
//! patch, raw_dim, embed_dim, classes   u32 × 4
//! proj, bias, w, v                     f64 arrays in model order
//! iteration  u64
//! has_bank   u8
//! bank       embedded bank file when has_bank = 1
//! ```

use crate::bank::io::{read_bank, Reader};
use crate::bank::{save_bank, InstanceBank};
use crate::error::{Error, Result};

use super::model::PixelModel;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: PixelModel,
    pub bank: Option<InstanceBank>,
    pub iteration: u64,
}

pub fn save_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let m = &ck.model;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for n in [m.patch, m.raw_dim, m.embed_dim, m.classes] {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for v in m.proj.iter().chain(&m.bias).chain(&m.w).chain(&m.v) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&ck.iteration.to_le_bytes());
    match &ck.bank {
        Some(b) => {
            out.push(1);
            out.extend(save_bank(b));
        }
        None => out.push(0),
    }
    out
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let patch = r.u32()? as usize;
    let raw_dim = r.u32()? as usize;
    let embed_dim = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let fan_in = patch * patch * 3;
    let model = PixelModel {
        patch,
        raw_dim,
        embed_dim,
        classes,
        proj: r.f64s(raw_dim * fan_in)?,
        bias: r.f64s(raw_dim)?,
        w: r.f64s(raw_dim * embed_dim)?,
        v: r.f64s(embed_dim * classes)?,
    };
    model.check()?;
    let iteration = r.u64()?;
    let bank = match r.u8()? {
        0 => None,
        1 => Some(read_bank(&mut r)?),
        b => return Err(Error::Format(format!("bad bank flag {b}"))),
    };
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", r.remaining())));
    }
    if let Some(b) = &bank {
        if b.dim() != embed_dim || b.classes() != classes {
            return Err(Error::Format("embedded bank does not match the model".into()));
        }
    }
    Ok(Checkpoint {
        model,
        bank,
        iteration,
    })
}
