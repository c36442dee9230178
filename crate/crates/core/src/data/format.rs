//! Binary dataset file.
//!
//! ```text
//! magic        4 bytes  "DACD"
//! version      u32 LE   (1)
//! state_dim    u32 LE
//! action_dim   u32 LE
//! n            u64 LE   transition count
//! n_traj       u64 LE   trajectory count
//! bounds_lo    action_dim x f64 LE
//! bounds_hi    action_dim x f64 LE
//! starts       n_traj x u64 LE
//! records      n x (s[state_dim], a[action_dim], r, s_next[state_dim], terminal) f64 LE
//! ```
//! `terminal` is stored as 0.0 or 1.0.

use std::path::Path;

use ndarray::{Array1, Array2};

use super::{ActionBounds, OfflineDataset};
use crate::error::{DacError, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"DACD";
pub const DATASET_VERSION: u32 = 1;

pub fn encode_dataset(ds: &OfflineDataset) -> Vec<u8> {
    let (sd, ad, n) = (ds.state_dim(), ds.action_dim(), ds.len());
    let mut out = Vec::with_capacity(32 + 16 * ad + 8 * ds.trajectory_starts().len() + 8 * n * (2 * sd + ad + 2));
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(sd as u32).to_le_bytes());
    out.extend_from_slice(&(ad as u32).to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(ds.trajectory_starts().len() as u64).to_le_bytes());
    for v in ds.bounds().lo.iter().chain(&ds.bounds().hi) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &s in ds.trajectory_starts() {
        out.extend_from_slice(&(s as u64).to_le_bytes());
    }
    for i in 0..n {
        let fields = ds
            .states()
            .row(i)
            .iter()
            .chain(ds.actions().row(i).iter())
            .copied()
            .chain(std::iter::once(ds.rewards()[i]))
            .chain(ds.next_states().row(i).iter().copied())
            .chain(std::iter::once(if ds.terminals()[i] { 1.0 } else { 0.0 }))
            .collect::<Vec<f64>>();
        for v in fields {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < len {
            return Err(DacError::Format { offset: self.pos, message: format!("truncated while reading {what}") });
        }
        let s = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn count(&mut self, what: &str, per_item: usize) -> Result<usize> {
        let at = self.pos;
        let v = self.u64(what)?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if per_item > 0 && v > remaining / per_item as u64 {
            return Err(DacError::Format { offset: at, message: format!("{what} {v} exceeds the file size") });
        }
        Ok(v as usize)
    }
}

pub fn decode_dataset(buf: &[u8]) -> Result<OfflineDataset> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != DATASET_MAGIC {
        return Err(DacError::Format { offset: 0, message: "bad magic, expected DACD".into() });
    }
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(DacError::Format { offset: 4, message: format!("unsupported version {version}") });
    }
    let sd = r.u32("state_dim")? as usize;
    let ad = r.u32("action_dim")? as usize;
    let record = 8 * (2 * sd + ad + 2);
    let n = r.count("transition count", record)?;
    let n_traj = r.count("trajectory count", 8)?;
    let lo = (0..ad).map(|_| r.f64("bounds")).collect::<Result<Vec<_>>>()?;
    let hi = (0..ad).map(|_| r.f64("bounds")).collect::<Result<Vec<_>>>()?;
    let starts = (0..n_traj).map(|_| r.u64("trajectory start").map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let mut states = Array2::zeros((n, sd));
    let mut actions = Array2::zeros((n, ad));
    let mut rewards = Array1::zeros(n);
    let mut next_states = Array2::zeros((n, sd));
    let mut terminals = Vec::with_capacity(n);
    for i in 0..n {
        for j in 0..sd {
            states[[i, j]] = r.f64("record")?;
        }
        for j in 0..ad {
            actions[[i, j]] = r.f64("record")?;
        }
        rewards[i] = r.f64("record")?;
        for j in 0..sd {
            next_states[[i, j]] = r.f64("record")?;
        }
        let at = r.pos;
        let t = r.f64("record")?;
        terminals.push(match t {
            v if v == 0.0 => false,
            v if v == 1.0 => true,
            other => return Err(DacError::Format { offset: at, message: format!("terminal flag {other} is not 0 or 1") }),
        });
    }
    if r.pos != buf.len() {
        return Err(DacError::Format { offset: r.pos, message: "trailing bytes after last record".into() });
    }
    let bounds = ActionBounds::new(lo, hi).map_err(|e| DacError::Format { offset: 32, message: e.to_string() })?;
    OfflineDataset::from_parts(states, actions, rewards, next_states, terminals, starts, bounds)
}

pub fn save_dataset(ds: &OfflineDataset, path: &Path) -> Result<()> {
    std::fs::write(path, encode_dataset(ds))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<OfflineDataset> {
    decode_dataset(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_bandit_dataset, BanditSpec, Transition};

    #[test]
    fn roundtrip_is_bit_exact() {
        let ds = generate_bandit_dataset(&BanditSpec { n: 50, ..BanditSpec::default() }).unwrap();
        let bytes = encode_dataset(&ds);
        let back = decode_dataset(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(encode_dataset(&back), bytes);
    }

    #[test]
    fn header_layout() {
        let ds = generate_bandit_dataset(&BanditSpec { n: 3, ..BanditSpec::default() }).unwrap();
        let b = encode_dataset(&ds);
        assert_eq!(&b[0..4], b"DACD");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[16..24].try_into().unwrap()), 3);
        assert_eq!(b.len(), 32 + 32 + 24 + 3 * 8 * 6);
    }

    #[test]
    fn wrong_magic() {
        let ds = generate_bandit_dataset(&BanditSpec { n: 3, ..BanditSpec::default() }).unwrap();
        let mut b = encode_dataset(&ds);
        b[0] = b'X';
        assert!(matches!(decode_dataset(&b), Err(DacError::Format { offset: 0, .. })));
    }

    #[test]
    fn truncation_reports_offset() {
        let ds = generate_bandit_dataset(&BanditSpec { n: 3, ..BanditSpec::default() }).unwrap();
        let b = encode_dataset(&ds);
        let cut = b.len() - 5;
        match decode_dataset(&b[..cut]) {
            Err(DacError::Format { offset, .. }) => assert_eq!(offset, b.len() - 8),
            other => panic!("expected format error, got {other:?}"),
        }
        match decode_dataset(&b[..10]) {
            Err(DacError::Format { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn non_terminal_flags_survive() {
        let ts = vec![
            Transition { state: vec![0.0, 1.0], action: vec![0.5], reward: 1.0, next_state: vec![1.0, 2.0], terminal: false },
            Transition { state: vec![1.0, 2.0], action: vec![-0.5], reward: 2.0, next_state: vec![2.0, 3.0], terminal: true },
        ];
        let ds = OfflineDataset::from_transitions(&ts, vec![0], 2, ActionBounds::symmetric(1, 1.0)).unwrap();
        assert_eq!(decode_dataset(&encode_dataset(&ds)).unwrap(), ds);
    }
}
