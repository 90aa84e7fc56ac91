//! Binary model checkpoints.
//!
//! Layout: five little-endian `u32`s (magic, version, input_dim, hidden_dim,
//! output_dim), then every parameter tensor in declaration order as
//! row-major little-endian `f64`: per layer the `in × out` weights followed
//! by the bias.

use std::io::{Read, Write};
use std::path::Path;

use super::{Architecture, Classifier, Layer};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// `b"CCLM"` read as a little-endian `u32`.
pub const CHECKPOINT_MAGIC: u32 = u32::from_le_bytes(*b"CCLM");
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &Classifier, mut out: W) -> std::io::Result<()> {
    let arch = model.architecture();
    for v in [
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        arch.input_dim as u32,
        arch.hidden_dim as u32,
        arch.output_dim as u32,
    ] {
        out.write_all(&v.to_le_bytes())?;
    }
    for p in model.parameters() {
        out.write_all(&p.to_le_bytes())?;
    }
    out.flush()
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Classifier> {
    let mut header = [0u8; 20];
    input
        .read_exact(&mut header)
        .map_err(|_| Error::decode("header", "truncated header"))?;
    let word = |i: usize| u32::from_le_bytes(header[4 * i..4 * i + 4].try_into().unwrap());
    if word(0) != CHECKPOINT_MAGIC {
        return Err(Error::decode("magic", format!("expected {CHECKPOINT_MAGIC:#x}, found {:#x}", word(0))));
    }
    if word(1) != CHECKPOINT_VERSION {
        return Err(Error::decode("version", format!("unsupported version {}", word(1))));
    }
    let arch = Architecture::new(word(2) as usize, word(3) as usize, word(4) as usize);
    let mut layers = Vec::new();
    for (fan_in, fan_out) in arch.layer_dims() {
        let weights = read_f64s(&mut input, fan_in * fan_out, "weights")?;
        let bias = read_f64s(&mut input, fan_out, "bias")?;
        layers.push(Layer {
            weights: Matrix::from_row_major(fan_in, fan_out, weights)?,
            bias,
        });
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest).map_err(|e| Error::decode("payload", e.to_string()))? != 0 {
        return Err(Error::decode("payload", "trailing bytes after the last tensor"));
    }
    Classifier::from_layers(arch, layers)
}

fn read_f64s<R: Read>(input: &mut R, n: usize, field: &'static str) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    input
        .read_exact(&mut buf)
        .map_err(|_| Error::decode(field, format!("truncated tensor of {n} values")))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn save_checkpoint(model: &Classifier, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(model, std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Classifier> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(file))
}
