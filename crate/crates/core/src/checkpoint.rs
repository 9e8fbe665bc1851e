//! Checkpoint container: magic `DPK1`, a little-endian u32 header length, a
//! JSON array describing each tensor (name, dtype, shape), then raw
//! little-endian f32 payloads in header order. Round trips are bit exact.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DPK1";

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

/// Write every parameter (trainable and running state) to `path`.
pub fn save<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let metas: Vec<TensorMeta> = store
        .iter()
        .map(|(_, p)| TensorMeta {
            name: p.name.clone(),
            dtype: "f32".to_string(),
            shape: p.value.shape().to_vec(),
        })
        .collect();
    let header = serde_json::to_vec(&metas)
        .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_all(&(header.len() as u32).to_le_bytes())?;
    file.write_all(&header)?;
    for (_, p) in store.iter() {
        for &v in p.value.data() {
            let bits = (v.to_f64().unwrap() as f32).to_bits();
            file.write_all(&bits.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

/// Read a checkpoint into tensors keyed by name.
pub fn read_tensors<T: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header = vec![0u8; header_len];
    file.read_exact(&mut header)?;
    let metas: Vec<TensorMeta> = serde_json::from_slice(&header)
        .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;
    let mut out = Vec::with_capacity(metas.len());
    for meta in metas {
        if meta.dtype != "f32" {
            return Err(Error::Checkpoint(format!(
                "tensor {}: unsupported dtype {}",
                meta.name, meta.dtype
            )));
        }
        let numel: usize = meta.shape.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        file.read_exact(&mut bytes)?;
        let data: Vec<T> = bytes
            .chunks_exact(4)
            .map(|c| {
                let bits = u32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                T::from_f32(f32::from_bits(bits)).unwrap()
            })
            .collect();
        out.push((meta.name, Tensor::new(meta.shape, data)?));
    }
    Ok(out)
}

/// Load a checkpoint into an existing store. Every parameter in the store
/// must be present in the file with a matching shape; extra file tensors are
/// ignored.
pub fn load<T: Scalar>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let tensors = read_tensors::<T>(path)?;
    let mut by_name: std::collections::HashMap<String, Tensor<T>> = tensors.into_iter().collect();
    let names: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).collect();
    let mut missing = Vec::new();
    for name in &names {
        if !by_name.contains_key(name) {
            missing.push(name.clone());
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingTensors { missing });
    }
    for name in names {
        let tensor = by_name.remove(&name).unwrap();
        let id = store.id_of(&name).unwrap();
        let param = store.get_mut(id);
        if param.value.shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: shape {:?} in file, {:?} in model",
                tensor.shape(),
                param.value.shape()
            )));
        }
        param.value = tensor;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_store() -> ParamStore<f32> {
        let mut store = ParamStore::new();
        store.insert(
            "a.w".to_string(),
            Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, 1.5e-7, -9.9, 42.0]).unwrap(),
            true,
        );
        store.insert("a.b".to_string(), Tensor::new(vec![3], vec![0.0, -0.0, 3.25]).unwrap(), true);
        store.insert("bn.rmean".to_string(), Tensor::full(vec![3], 0.5), false);
        store
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join("dpk-test-roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.dpk");
        let store = demo_store();
        save(&store, &path).unwrap();
        let mut other = demo_store();
        for (_, p) in other.iter_mut() {
            for v in p.value.data_mut() {
                *v = 7.0;
            }
        }
        load(&mut other, &path).unwrap();
        for ((_, a), (_, b)) in store.iter().zip(other.iter()) {
            assert_eq!(a.name, b.name);
            let bits_a: Vec<u32> = a.value.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn missing_tensor_is_reported_by_name() {
        let dir = std::env::temp_dir().join("dpk-test-missing");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.dpk");
        let store = demo_store();
        save(&store, &path).unwrap();
        let mut bigger = demo_store();
        bigger.insert("extra.w".to_string(), Tensor::zeros(vec![4]), true);
        let err = load(&mut bigger, &path).unwrap_err();
        match err {
            Error::MissingTensors { missing } => assert_eq!(missing, vec!["extra.w".to_string()]),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = std::env::temp_dir().join("dpk-test-magic");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.dpk");
        std::fs::write(&path, b"NOPE\x00\x00\x00\x00").unwrap();
        let mut store = demo_store();
        assert!(matches!(load(&mut store, &path), Err(Error::Checkpoint(_))));
    }
}
