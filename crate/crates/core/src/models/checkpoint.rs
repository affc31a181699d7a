//! Binary model checkpoints: little-endian, self-describing.
//!
//! Layout: magic `NLGPCKPT`, `u32` version, `u64`-prefixed JSON model spec,
//! `u64` training-set size, `u64` parameter count, then per parameter a
//! `u32`-prefixed UTF-8 name, a `u8` constraint code, `u64` rows, `u64`
//! columns and the raw (unconstrained) values as column-major `f64`.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Data, Model, ModelSpec};
use crate::diffmath::{Constraint, Mat};
use crate::error::{Error, Result};
use crate::likelihoods::OutputMask;

const MAGIC: &[u8; 8] = b"NLGPCKPT";
const VERSION: u32 = 1;

fn ckpt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let spec = serde_json::to_vec(&model.spec)?;
    out.extend_from_slice(&(spec.len() as u64).to_le_bytes());
    out.extend_from_slice(&spec);
    out.extend_from_slice(&(model.n_data as u64).to_le_bytes());
    out.extend_from_slice(&(model.ps.len() as u64).to_le_bytes());
    for p in model.ps.iter() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.push(p.constraint.code());
        out.extend_from_slice(&(p.raw.nrows() as u64).to_le_bytes());
        out.extend_from_slice(&(p.raw.ncols() as u64).to_le_bytes());
        for v in p.raw.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| ckpt("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| ckpt("length overflow"))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Model> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(ckpt("not a model checkpoint"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ckpt(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u64()?;
    let spec: ModelSpec = serde_json::from_slice(r.take(len)?)?;
    let n_data = r.u64()?;
    if n_data == 0 {
        return Err(ckpt("empty training set"));
    }
    // Rebuild the structure on placeholder data, then overwrite every value.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let y = super::randn(&mut rng, n_data, spec.d_y);
    let data = if spec.latent_inputs {
        Data::outputs(&y, &OutputMask::all(n_data, spec.d_y))?
    } else {
        Data::observed(super::randn(&mut rng, n_data, spec.d_x), &y)?
    };
    let mut model = Model::build(&spec, &data, 0)?;
    let count = r.u64()?;
    if count != model.ps.len() {
        return Err(ckpt(format!(
            "checkpoint has {count} parameters, model structure has {}",
            model.ps.len()
        )));
    }
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?).map_err(|_| ckpt("invalid parameter name"))?;
        let code = r.u8()?;
        let constraint = Constraint::from_code(code).ok_or_else(|| ckpt("unknown constraint code"))?;
        let rows = r.u64()?;
        let cols = r.u64()?;
        let id = model
            .ps
            .id_of(name)
            .ok_or_else(|| ckpt(format!("unexpected parameter '{name}'")))?;
        let p = model.ps.get_mut(id);
        if p.constraint != constraint || p.raw.shape() != (rows, cols) {
            return Err(ckpt(format!("parameter '{name}' has the wrong layout")));
        }
        let mut vals = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            vals.push(r.f64()?);
        }
        p.raw = Mat::from_vec(rows, cols, vals);
    }
    if r.pos != buf.len() {
        return Err(ckpt("trailing bytes"));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    from_bytes(&buf)
}
