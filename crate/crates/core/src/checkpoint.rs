//! Checkpoint format: one JSON manifest line, a newline, then all
//! tensor data as little-endian f32, concatenated in manifest order.
//!
//! ```text
//! {"meta":{...},"tensors":[{"name":"fc.bias","shape":[10],"offset":0,"len":10}, ...]}\n
//! <4-byte LE f32 × total elements>
//! ```
//!
//! The manifest's `meta` field carries whatever the model type needs to
//! rebuild itself (for gated models, the full build arguments).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{BuildArgs, GatedNetwork};
use crate::optim::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset and length in f32 elements within the blob.
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Writes tensors with an arbitrary metadata payload.
pub fn save_raw(path: &Path, meta: &serde_json::Value, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0usize;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            len: t.len(),
        });
        offset += t.len();
    }
    let manifest = Manifest { meta: meta.clone(), tensors: entries };
    let mut file = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    serde_json::to_writer(&mut file, &manifest)?;
    file.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    for (_, t) in tensors {
        for &v in t.data() {
            file.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
    }
    file.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a checkpoint back as (meta, named tensors in manifest order).
pub fn load_raw(path: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint(format!("{}: no manifest line", path.display())))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| Error::Checkpoint(format!("{}: bad manifest: {e}", path.display())))?;
    let blob = &bytes[newline + 1..];

    let total: usize = manifest.tensors.iter().map(|t| t.len).sum();
    if blob.len() != total * 4 {
        return Err(Error::Truncated {
            path: path.display().to_string(),
            needed: newline + 1 + total * 4,
            got: bytes.len(),
        });
    }

    let mut out = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let expected: usize = entry.shape.iter().product();
        if expected != entry.len {
            return Err(Error::Checkpoint(format!(
                "{}: tensor '{}' declares shape {:?} but {} elements",
                path.display(),
                entry.name,
                entry.shape,
                entry.len
            )));
        }
        let start = entry.offset * 4;
        let end = start + entry.len * 4;
        if end > blob.len() {
            return Err(Error::Truncated {
                path: path.display().to_string(),
                needed: newline + 1 + end,
                got: bytes.len(),
            });
        }
        let data: Vec<f32> = blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
    }
    Ok((manifest.meta, out))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
enum GatedMeta {
    Gated { args: BuildArgs },
}

/// Saves a gated model: build arguments plus every parameter and
/// buffer, in registration order.
pub fn save_gated(path: &Path, net: &GatedNetwork, store: &ParamStore) -> Result<()> {
    let meta = serde_json::to_value(GatedMeta::Gated { args: net.args.clone() })?;
    let tensors: Vec<(&str, &Tensor)> = store.iter().map(|p| (p.name.as_str(), &p.value)).collect();
    save_raw(path, &meta, &tensors)
}

/// Rebuilds a gated model from a checkpoint: reconstructs the network
/// from the stored build arguments, then overwrites every tensor.
pub fn load_gated(path: &Path) -> Result<(GatedNetwork, ParamStore)> {
    let (meta, tensors) = load_raw(path)?;
    let GatedMeta::Gated { args } = serde_json::from_value(meta)
        .map_err(|e| Error::Checkpoint(format!("{}: not a gated-model checkpoint: {e}", path.display())))?;
    let (net, mut store) = GatedNetwork::build(args)?;
    let mut seen = 0usize;
    for (name, t) in tensors {
        store.set_value(&name, t)?;
        seen += 1;
    }
    if seen != store.len() {
        return Err(Error::Checkpoint(format!(
            "{}: has {seen} tensors but the model needs {}",
            path.display(),
            store.len()
        )));
    }
    Ok((net, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{GateKind, Granularity, NetworkSpec};

    #[test]
    fn raw_round_trip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let a = Tensor::new(vec![2, 3], vec![1.5, -2.25, 0.0, f32::MIN_POSITIVE, 1e30, -0.0]).unwrap();
        let b = Tensor::scalar(0.125);
        let meta = serde_json::json!({"note": "fixture"});
        save_raw(&path, &meta, &[("a", &a), ("b", &b)]).unwrap();
        let (meta_back, tensors) = load_raw(&path).unwrap();
        assert_eq!(meta_back["note"], "fixture");
        assert_eq!(tensors.len(), 2);
        assert_eq!(tensors[0].0, "a");
        assert_eq!(tensors[0].1.shape(), &[2, 3]);
        for (x, y) in tensors[0].1.data().iter().zip(a.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(tensors[1].1.item(), 0.125);
    }

    #[test]
    fn truncated_blob_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let a = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        save_raw(&path, &serde_json::Value::Null, &[("a", &a)]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_raw(&path).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }), "{err}");
    }

    #[test]
    fn gated_model_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut args = BuildArgs::new(
            NetworkSpec::desk_reference(4),
            GateKind::Independent,
            Granularity::Layer,
        );
        args.seed = 13;
        let (net, mut store) = GatedNetwork::build(args).unwrap();
        // Perturb a parameter and a buffer so the save isn't just the init.
        let mut w = store.value("fc.bias").unwrap().clone();
        w.data_mut()[0] = 0.75;
        store.set_value("fc.bias", w).unwrap();
        let mut rv = store.value("stem.bn.running_var").unwrap().clone();
        rv.data_mut()[3] = 2.5;
        store.set_value("stem.bn.running_var", rv).unwrap();

        save_gated(&path, &net, &store).unwrap();
        let (net2, store2) = load_gated(&path).unwrap();
        assert_eq!(net2.registry.num_gates(), net.registry.num_gates());
        assert_eq!(net2.args.seed, 13);
        for p in store.iter() {
            let q = store2.value(&p.name).unwrap();
            assert_eq!(p.value.shape(), q.shape());
            for (x, y) in p.value.data().iter().zip(q.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "tensor {}", p.name);
            }
        }
        // Weight-decay coefficients come back through the build args.
        let gate_wd = store.iter().find(|p| p.name.starts_with("gate.")).unwrap().weight_decay;
        let gate_wd2 = store2.iter().find(|p| p.name.starts_with("gate.")).unwrap().weight_decay;
        assert_eq!(gate_wd, gate_wd2);
    }

    #[test]
    fn wrong_meta_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let a = Tensor::scalar(1.0);
        save_raw(&path, &serde_json::json!({"model": "other"}), &[("a", &a)]).unwrap();
        assert!(load_gated(&path).is_err());
    }
}
