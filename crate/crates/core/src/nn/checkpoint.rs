//! Checkpoint container: magic "GEOL", a format version, a JSON manifest of
//! hyperparameters, then named little-endian arrays. Serialization order is
//! the parameter name order, so identical stores produce identical bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::nn::optim::ParameterStore;
use crate::nn::tensor::{Real, Tensor};

const MAGIC: &[u8; 4] = b"GEOL";
pub const FORMAT_VERSION: u32 = 1;

const DTYPE_F32: u8 = 1;
const DTYPE_F64: u8 = 2;

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn dtype_of<T: Real>() -> u8 {
    if std::mem::size_of::<T>() == 4 {
        DTYPE_F32
    } else {
        DTYPE_F64
    }
}

/// Writes manifest plus all parameters of the store.
pub fn save<T: Real>(path: &Path, manifest: &Value, store: &ParameterStore<T>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, FORMAT_VERSION)?;
    let manifest_bytes = serde_json::to_vec(manifest)?;
    write_u64(&mut w, manifest_bytes.len() as u64)?;
    w.write_all(&manifest_bytes)?;
    write_u64(&mut w, store.len() as u64)?;
    let dtype = dtype_of::<T>();
    for (name, tensor) in store.iter() {
        write_u64(&mut w, name.len() as u64)?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[dtype])?;
        write_u64(&mut w, tensor.shape().len() as u64)?;
        for &d in tensor.shape() {
            write_u64(&mut w, d as u64)?;
        }
        match dtype {
            DTYPE_F32 => {
                for &v in tensor.data() {
                    w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
                }
            }
            _ => {
                for &v in tensor.data() {
                    w.write_all(&v.to_f64().to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads manifest and arrays back. Shape validation against a model spec
/// happens at the loading call site, which knows the expected dimensions.
pub fn load<T: Real>(path: &Path) -> Result<(Value, BTreeMap<String, Tensor<T>>)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?} in {}",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let manifest_len = read_u64(&mut r)? as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    r.read_exact(&mut manifest_bytes)?;
    let manifest: Value = serde_json::from_slice(&manifest_bytes)?;

    let count = read_u64(&mut r)? as usize;
    let mut arrays = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u64(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Checkpoint(format!("bad array name: {e}")))?;
        let mut dtype = [0u8; 1];
        r.read_exact(&mut dtype)?;
        let ndim = read_u64(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        match dtype[0] {
            DTYPE_F32 => {
                let mut buf = [0u8; 4];
                for _ in 0..len {
                    r.read_exact(&mut buf)?;
                    data.push(T::from_f64(f64::from(f32::from_le_bytes(buf))));
                }
            }
            DTYPE_F64 => {
                let mut buf = [0u8; 8];
                for _ in 0..len {
                    r.read_exact(&mut buf)?;
                    data.push(T::from_f64(f64::from_le_bytes(buf)));
                }
            }
            other => {
                return Err(Error::Checkpoint(format!("unknown dtype tag {other}")));
            }
        }
        arrays.insert(name, Tensor::new(shape, data)?);
    }
    Ok((manifest, arrays))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.geol");
        let mut store: ParameterStore<f32> = ParameterStore::new();
        store
            .insert("a.w", Tensor::new(vec![2, 2], vec![0.1, -0.2, 0.3, 0.4]).unwrap())
            .unwrap();
        store.insert("b.bias", Tensor::scalar(1.25)).unwrap();
        let manifest = json!({"hidden": 32, "seed": 7});
        save(&path, &manifest, &store).unwrap();
        let (m2, arrays) = load::<f32>(&path).unwrap();
        assert_eq!(m2, manifest);
        assert_eq!(arrays["a.w"], *store.get("a.w").unwrap());
        assert_eq!(arrays["b.bias"], *store.get("b.bias").unwrap());
    }

    #[test]
    fn identical_stores_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.geol");
        let p2 = dir.path().join("b.geol");
        let mut store: ParameterStore<f32> = ParameterStore::new();
        store
            .insert("x", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        let manifest = json!({"v": 1});
        save(&p1, &manifest, &store).unwrap();
        save(&p2, &manifest, &store).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.geol");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(load::<f32>(&path).is_err());
    }
}
