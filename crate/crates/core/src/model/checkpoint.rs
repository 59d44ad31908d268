//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "DIVTOKCK"
//! version  u32      = 1
//! config   6 × u64  vocab_size d_model n_heads n_layers d_ff max_seq
//! params   f64 LE   every tensor of ToyModel::params(), row-major, in order
//! masks    per component (layer-major, kind order): u8 flag, then if
//!          flag = 1 one byte per entry (1 keep, 0 drop)
//! ```
//!
//! Identical models serialize to identical bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Mask, ModelConfig, ToyModel};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DIVTOKCK";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &ToyModel, mut w: W) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let c = &model.config;
    for v in [c.vocab_size, c.d_model, c.n_heads, c.n_layers, c.d_ff, c.max_seq] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    for (_, p) in model.params() {
        for v in p {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for layer in &model.layers {
        for m in &layer.masks {
            match m {
                None => w.write_all(&[0])?,
                Some(m) => {
                    w.write_all(&[1])?;
                    let bytes: Vec<u8> = m.keep().iter().map(|&k| k as u8).collect();
                    w.write_all(&bytes)?;
                }
            }
        }
    }
    w.flush()
}

fn read_exact<const N: usize, R: Read>(r: &mut R) -> std::io::Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ToyModel> {
    let bad = |e: std::io::Error| Error::Schema(format!("truncated checkpoint: {e}"));
    let magic = read_exact::<8, _>(&mut r).map_err(bad)?;
    if &magic != MAGIC {
        return Err(Error::Schema("not a divtok checkpoint".into()));
    }
    let version = u32::from_le_bytes(read_exact::<4, _>(&mut r).map_err(bad)?);
    if version != VERSION {
        return Err(Error::Schema(format!("unsupported checkpoint version {version}")));
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = u64::from_le_bytes(read_exact::<8, _>(&mut r).map_err(bad)?) as usize;
    }
    let config = ModelConfig {
        vocab_size: dims[0],
        d_model: dims[1],
        n_heads: dims[2],
        n_layers: dims[3],
        d_ff: dims[4],
        max_seq: dims[5],
    };
    config
        .validate()
        .map_err(|e| Error::Schema(format!("checkpoint config invalid: {e}")))?;
    // Shapes come from the config; values are overwritten below.
    let mut model = ToyModel::random_init(config, 0)?;
    for p in model.params_mut() {
        for v in p.iter_mut() {
            *v = f64::from_le_bytes(read_exact::<8, _>(&mut r).map_err(bad)?);
            if !v.is_finite() {
                return Err(Error::Schema("checkpoint holds non-finite weights".into()));
            }
        }
    }
    for id in model.components() {
        let flag = read_exact::<1, _>(&mut r).map_err(bad)?[0];
        let mask = match flag {
            0 => None,
            1 => {
                let (rows, cols) = id.kind.shape(&config);
                let mut bytes = vec![0u8; rows * cols];
                r.read_exact(&mut bytes).map_err(bad)?;
                if bytes.iter().any(|&b| b > 1) {
                    return Err(Error::Schema(format!("mask of {id} is not binary")));
                }
                Some(Mask::from_keep(rows, cols, bytes.into_iter().map(|b| b == 1).collect())?)
            }
            f => return Err(Error::Schema(format!("bad mask flag {f} for {id}"))),
        };
        model.set_mask(id, mask)?;
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(bad)?;
    if !rest.is_empty() {
        return Err(Error::Schema(format!("{} trailing bytes in checkpoint", rest.len())));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &ToyModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(model, BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ToyModel> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(f))
}
