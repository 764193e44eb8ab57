//! Model checkpoint files.
//!
//! Byte layout, all integers and floats little-endian:
//!
//! | offset | size          | field                                   |
//! |--------|---------------|-----------------------------------------|
//! | 0      | 8             | magic `DGSTCKPT`                        |
//! | 8      | 4 (u32)       | format version, currently 1             |
//! | 12     | 1 (u8)        | hidden activation: 0 = relu, 1 = identity |
//! | 13     | 4 (u32)       | layer count `L`                         |
//! | 17     | 8·(L+1) (u64) | dimensions `d_0 … d_L`                  |
//! | …      | 8·d_{ℓ-1}·d_ℓ | `W^(ℓ)` as row-major f64, for ℓ = 1..L  |

use std::io::{Read, Write};
use std::path::Path;

use super::{Activation, Dense, GcnModel, NnError};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DGSTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &GcnModel, mut out: W) -> std::io::Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&[match model.activation() {
        Activation::Relu => 0u8,
        Activation::Identity => 1u8,
    }])?;
    out.write_all(&(model.num_layers() as u32).to_le_bytes())?;
    for &d in model.dims() {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    for w in model.weights() {
        for v in w.as_slice() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<GcnModel, NnError> {
    let bad = |m: String| NnError::Checkpoint(m);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = read_u32(&mut input)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let mut act = [0u8; 1];
    input.read_exact(&mut act)?;
    let activation = match act[0] {
        0 => Activation::Relu,
        1 => Activation::Identity,
        other => return Err(bad(format!("unknown activation tag {other}"))),
    };
    let layers = read_u32(&mut input)? as usize;
    if layers == 0 || layers > 1024 {
        return Err(bad(format!("implausible layer count {layers}")));
    }
    let dims = (0..=layers)
        .map(|_| read_u64(&mut input).map(|d| d as usize))
        .collect::<std::io::Result<Vec<_>>>()?;
    let mut weights = Vec::with_capacity(layers);
    for w in dims.windows(2) {
        let n = w[0]
            .checked_mul(w[1])
            .filter(|&n| n < (1 << 32))
            .ok_or_else(|| bad(format!("implausible layer size {}x{}", w[0], w[1])))?;
        let mut buf = vec![0u8; n * 8];
        input.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        weights.push(Dense::from_vec(w[0], w[1], data)?);
    }
    GcnModel::from_weights(weights, activation)
}

pub fn save_checkpoint(model: &GcnModel, path: &Path) -> Result<(), NnError> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<GcnModel, NnError> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file))
}
