//! Flat parameter file.
//!
//! ```text
//! "DACP"            4 bytes
//! version           u32 LE (currently 1)
//! layer count       u32 LE
//! per layer:
//!   out, in         u32 LE each
//!   weight          out*in f64 LE, row-major
//!   bias            out f64 LE
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{NnError, Result};
use crate::mlp::{Linear, ParamSet};

pub const PARAM_MAGIC: &[u8; 4] = b"DACP";
pub const PARAM_VERSION: u32 = 1;

pub fn encode_params<P: ParamSet + ?Sized>(params: &P) -> Vec<u8> {
    let layers = params.linears();
    let mut out = Vec::with_capacity(12 + params.num_params() * 8 + layers.len() * 8);
    out.extend_from_slice(PARAM_MAGIC);
    out.extend_from_slice(&PARAM_VERSION.to_le_bytes());
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for l in layers {
        out.extend_from_slice(&(l.output_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(l.input_dim() as u32).to_le_bytes());
        for s in l.slices() {
            for v in s {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(NnError::Format { offset: self.pos, message: format!("truncated while reading {what}") });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n * 8, what)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn decode_params(buf: &[u8]) -> Result<Vec<Linear>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != PARAM_MAGIC {
        return Err(NnError::Format { offset: 0, message: "bad magic, expected DACP".into() });
    }
    let version = r.u32("version")?;
    if version != PARAM_VERSION {
        return Err(NnError::Format { offset: 4, message: format!("unsupported version {version}") });
    }
    let count = r.u32("layer count")? as usize;
    let mut layers = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let out = r.u32("layer dims")? as usize;
        let inp = r.u32("layer dims")? as usize;
        let w = r.f64s(out * inp, &format!("layer {i} weights"))?;
        let b = r.f64s(out, &format!("layer {i} bias"))?;
        layers.push(Linear {
            weight: Array2::from_shape_vec((out, inp), w).expect("sized above"),
            bias: Array1::from(b),
        });
    }
    if r.pos != buf.len() {
        return Err(NnError::Format { offset: r.pos, message: "trailing bytes".into() });
    }
    Ok(layers)
}

pub fn write_params<P: ParamSet + ?Sized>(path: &Path, params: &P) -> Result<()> {
    fs::write(path, encode_params(params))?;
    Ok(())
}

pub fn read_params(path: &Path) -> Result<Vec<Linear>> {
    decode_params(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::MlpParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn header_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = MlpParams::new(2, 3, 1, 1, &mut rng);
        let bytes = encode_params(&p);
        assert_eq!(&bytes[..4], b"DACP");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 2);
        let w00 = f64::from_le_bytes(bytes[20..28].try_into().unwrap());
        assert_eq!(w00, p.layers[0].weight[[0, 0]]);
        assert_eq!(bytes.len(), 12 + 8 + (6 + 3) * 8 + 8 + (3 + 1) * 8);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = MlpParams::new(2, 3, 1, 1, &mut rng);
        let bytes = encode_params(&p);
        match decode_params(&bytes[..30]) {
            Err(NnError::Format { offset, .. }) => assert_eq!(offset, 20),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_magic_rejected() {
        let mut bytes = encode_params(&MlpParams::new(1, 1, 0, 1, &mut ChaCha8Rng::seed_from_u64(2)));
        bytes[0] = b'X';
        assert!(matches!(decode_params(&bytes), Err(NnError::Format { offset: 0, .. })));
    }
}
