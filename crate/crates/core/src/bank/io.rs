//! Bank file layout, all integers and floats little-endian:
//!
//! ```text
//! magic    4 bytes  "IBNK"
//! version  u32      1
//! K, C, D  u32 × 3
//! features f64 × K·D   row-major
//! labels   u32 × K
//! cursors  u32 × C
//! updates  u64
//! filled   u8
//! ```

use crate::error::{Error, Result};

use super::InstanceBank;

pub const BANK_MAGIC: &[u8; 4] = b"IBNK";
pub const BANK_VERSION: u32 = 1;

pub fn save_bank(bank: &InstanceBank) -> Vec<u8> {
    let k = bank.size();
    let mut out = Vec::with_capacity(20 + k * bank.dim() * 8 + k * 4 + bank.classes() * 4 + 9);
    out.extend_from_slice(BANK_MAGIC);
    out.extend_from_slice(&BANK_VERSION.to_le_bytes());
    for n in [k, bank.classes(), bank.dim()] {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for v in bank.features() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &l in bank.labels() {
        out.extend_from_slice(&u32::from(l).to_le_bytes());
    }
    for &c in bank.cursors() {
        out.extend_from_slice(&(c as u32).to_le_bytes());
    }
    out.extend_from_slice(&bank.updates_applied().to_le_bytes());
    out.push(u8::from(bank.is_filled()));
    out
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated: need {n} bytes at offset {}, have {}",
                    self.pos,
                    self.buf.len() - self.pos
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn position(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub(crate) fn read_bank(r: &mut Reader<'_>) -> Result<InstanceBank> {
    if r.take(4)? != BANK_MAGIC {
        return Err(Error::Format("not a bank file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != BANK_VERSION {
        return Err(Error::Format(format!(
            "unsupported bank version {version}, expected {BANK_VERSION}"
        )));
    }
    let k = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let dim = r.u32()? as usize;
    if dim == 0 || classes == 0 || k < classes {
        return Err(Error::Format(format!("bad bank header K={k} C={classes} D={dim}")));
    }
    let features = r.f64s(k.checked_mul(dim).ok_or_else(|| Error::Format("size overflow".into()))?)?;
    let mut labels = Vec::with_capacity(k);
    for _ in 0..k {
        let l = r.u32()?;
        labels.push(u8::try_from(l).map_err(|_| Error::Format(format!("label {l} out of range")))?);
    }
    let mut cursors = Vec::with_capacity(classes);
    for _ in 0..classes {
        cursors.push(r.u32()? as usize);
    }
    let updates = r.u64()?;
    let filled = match r.u8()? {
        0 => false,
        1 => true,
        b => return Err(Error::Format(format!("bad fill flag {b}"))),
    };
    InstanceBank::from_parts(dim, features, labels, classes, cursors, updates, filled)
}

pub fn load_bank(bytes: &[u8]) -> Result<InstanceBank> {
    let mut r = Reader::new(bytes);
    let bank = read_bank(&mut r)?;
    if r.remaining() != 0 {
        return Err(Error::Format(format!(
            "{} trailing bytes after bank at offset {}",
            r.remaining(),
            r.position()
        )));
    }
    Ok(bank)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::bank::{init_bank, BankUpdatePolicy};
    use crate::numerics::Rng;

    fn sample() -> InstanceBank {
        let mut b = init_bank(7, 3, 4, &mut Rng::new(2), None).unwrap();
        let sel: BTreeMap<u8, Vec<f64>> = [(1u8, vec![0.1, 0.2, 0.3, 0.4])].into_iter().collect();
        b.ema_update(&sel, &BankUpdatePolicy::default()).unwrap();
        b
    }

    #[test]
    fn round_trip_is_exact() {
        let b = sample();
        let bytes = save_bank(&b);
        let back = load_bank(&bytes).unwrap();
        assert_eq!(back, b);
        assert_eq!(save_bank(&back), bytes);
    }

    #[test]
    fn truncation_is_an_error() {
        let bytes = save_bank(&sample());
        for cut in [0, 3, 10, 20, bytes.len() - 1] {
            assert!(load_bank(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn wrong_version_is_an_error() {
        let mut bytes = save_bank(&sample());
        bytes[4] = 9;
        let err = load_bank(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn bad_magic_and_trailing_bytes_are_errors() {
        let mut bytes = save_bank(&sample());
        bytes.push(0);
        assert!(load_bank(&bytes).is_err());
        bytes.pop();
        bytes[0] = b'X';
        assert!(load_bank(&bytes).is_err());
    }
}
