//! Versioned binary parameter checkpoints.
//!
//! Layout (little endian):
//! `"FSPARAMS"` · u32 version · bytes(arch JSON) · u32 tensor count ·
//! per tensor { bytes(name) · u32 ndim · u64 dims… · f64 payload… }.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::model::{ModelArch, ModelParams, NamedTensor, HEAD_BIAS, HEAD_WEIGHT};
use crate::binio::*;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FSPARAMS";
pub const VERSION: u32 = 1;
const MAX_ELEMS: u64 = 1 << 32;

pub fn write_params(w: &mut impl Write, params: &ModelParams) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    put_bytes(w, &serde_json::to_vec(&params.arch)?)?;
    put_len(w, params.num_tensors())?;
    for (name, t) in params.tensors() {
        put_bytes(w, name.as_bytes())?;
        put_len(w, t.shape().len())?;
        for &d in t.shape() {
            put_u64(w, d as u64)?;
        }
        for &v in t.data() {
            put_f64(w, v)?;
        }
    }
    Ok(())
}

pub fn read_params(r: &mut impl Read) -> Result<ModelParams> {
    expect_magic(r, MAGIC)?;
    expect_version(r, VERSION)?;
    let arch: ModelArch = serde_json::from_slice(&get_bytes(r, 1 << 20)?)?;
    let count = get_u32(r)? as usize;
    let mut named = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name = String::from_utf8(get_bytes(r, 4096)?).map_err(|e| Error::Schema(e.to_string()))?;
        let ndim = get_u32(r)? as usize;
        if ndim > 8 {
            return Err(Error::Schema(format!("tensor {name} has {ndim} dims")));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut total: u64 = 1;
        for _ in 0..ndim {
            let d = get_u64(r)?;
            total = total.saturating_mul(d);
            shape.push(d as usize);
        }
        if total > MAX_ELEMS {
            return Err(Error::Schema(format!("tensor {name} too large")));
        }
        let mut data = Vec::with_capacity(total as usize);
        for _ in 0..total {
            data.push(get_f64(r)?);
        }
        named.push(NamedTensor { name, tensor: Tensor::from_vec(&shape, data)? });
    }
    let bias = named.pop().filter(|t| t.name == HEAD_BIAS);
    let weight = named.pop().filter(|t| t.name == HEAD_WEIGHT);
    match (weight, bias) {
        (Some(w), Some(b)) => ModelParams::from_parts(arch, named, w.tensor, b.tensor),
        _ => Err(Error::Schema("checkpoint lacks classifier tensors".into())),
    }
}

pub fn save_params(path: impl AsRef<Path>, params: &ModelParams) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_params(&mut w, params)?;
    w.flush()?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    read_params(&mut r).map_err(|e| match e {
        Error::Io(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
            Error::Corrupt { path: path.to_path_buf(), reason: "truncated".into() }
        }
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::EncoderArch;
    use crate::rng::stream;

    fn sample() -> ModelParams {
        let arch = ModelArch {
            encoder: EncoderArch::Conv { in_channels: 1, image_size: 4, channels: vec![2], feature_dim: 3 },
            num_outputs: 8,
            rotation_head: true,
        };
        ModelParams::init(arch, &mut stream(3, "ckpt", &[])).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = sample();
        let mut buf = Vec::new();
        write_params(&mut buf, &p).unwrap();
        let q = read_params(&mut buf.as_slice()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn wrong_version_is_schema_error() {
        let mut buf = Vec::new();
        write_params(&mut buf, &sample()).unwrap();
        buf[8] = 9;
        assert!(matches!(read_params(&mut buf.as_slice()), Err(Error::Schema(_))));
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let mut buf = Vec::new();
        write_params(&mut buf, &sample()).unwrap();
        std::fs::write(&path, &buf[..buf.len() - 5]).unwrap();
        assert!(matches!(load_params(&path), Err(Error::Corrupt { .. })));
    }
}
