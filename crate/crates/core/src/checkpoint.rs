//! Binary checkpoint container for named tensors.
//!
//! Layout (all integers little-endian):
//! magic `GKDC`, format version u32, tensor count u32, then per tensor:
//! name length u32 + UTF-8 name, rank u32, extents as u64, values as
//! little-endian f64. Round-trips are bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::ParamModule;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GKDC";
pub const VERSION: u32 = 1;

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(String, &Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format(format!(
            "bad checkpoint magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::format(format!("tensor name not UTF-8: {e}")))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        out.push((name, Tensor::from_vec(shape, data)?));
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Serializes a module's parameters in their canonical order.
pub fn module_bytes<M: ParamModule>(module: &M) -> Vec<u8> {
    let mut buf = Vec::new();
    write_tensors(&mut buf, &module.named_params()).expect("in-memory write cannot fail");
    buf
}

pub fn save_module<M: ParamModule>(path: &Path, module: &M) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_tensors(std::io::BufWriter::new(file), &module.named_params())
}

/// Loads named tensors into a module. Names, order, and shapes must match
/// the module's canonical parameter list exactly.
pub fn load_module<M: ParamModule>(path: &Path, module: &mut M) -> Result<()> {
    let file = std::fs::File::open(path)?;
    let tensors = read_tensors(std::io::BufReader::new(file))?;
    let mut params = module.named_params_mut();
    if tensors.len() != params.len() {
        return Err(Error::format(format!(
            "checkpoint holds {} tensors, module expects {}",
            tensors.len(),
            params.len()
        )));
    }
    for ((name, tensor), (want_name, param)) in tensors.into_iter().zip(params.iter_mut()) {
        if &name != want_name {
            return Err(Error::format(format!(
                "checkpoint tensor {name} does not match expected parameter {want_name}"
            )));
        }
        if tensor.shape() != param.shape() {
            return Err(Error::format(format!(
                "checkpoint tensor {} has shape {:?}, expected {:?}",
                name,
                tensor.shape(),
                param.shape()
            )));
        }
        **param = tensor;
    }
    Ok(())
}

/// SHA-256 of the module's canonical serialization, as lowercase hex.
pub fn module_hash<M: ParamModule>(module: &M) -> String {
    let mut hasher = Sha256::new();
    hasher.update(module_bytes(module));
    hex_string(&hasher.finalize())
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex_string(&hasher.finalize()))
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
