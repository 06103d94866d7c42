//! Versioned binary checkpoint container.
//!
//! Layout: an 8-byte magic, a JSON header (schema version, network config,
//! config hash), then length-prefixed named f64 arrays in canonical order:
//! every model parameter plus any auxiliary arrays (names prefixed "aux.",
//! e.g. the preprocessing mean image). All floats are little-endian IEEE 754
//! doubles, so a load is bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ScaleParams;
use crate::tensor::Tensor;

use super::{config_hash, ModelParams, NetworkConfig};

const MAGIC: &[u8; 8] = b"CPZCKPT1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema_version: String,
    config: NetworkConfig,
    config_hash: String,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

/// A loaded checkpoint: the full parameter set, auxiliary arrays, and the
/// provenance strings stamped by the writer.
pub struct Checkpoint {
    pub params: ModelParams,
    pub aux: BTreeMap<String, Tensor>,
    pub meta: BTreeMap<String, String>,
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_entry(w: &mut impl Write, name: &str, t: &Tensor) -> Result<()> {
    write_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    write_u32(w, t.shape().len() as u32)?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Write `params`, auxiliary arrays and provenance strings to `path`.
pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    aux: &BTreeMap<String, Tensor>,
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    let header = Header {
        schema_version: crate::VERSION.to_string(),
        config: params.config().clone(),
        config_hash: config_hash(params.config()),
        meta: meta.clone(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
    write_u32(&mut w, header_json.len() as u32)?;
    w.write_all(&header_json)?;
    write_u32(&mut w, (params.len() + aux.len()) as u32)?;
    for i in 0..params.len() {
        let p = params.param(i);
        write_entry(&mut w, &p.name, &p.value)?;
    }
    for (name, t) in aux {
        if !name.starts_with("aux.") {
            return Err(Error::Config(format!(
                "auxiliary checkpoint entries must be named aux.*, got {name}"
            )));
        }
        write_entry(&mut w, name, t)?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Data(format!("checkpoint truncated reading {what}: {e}")))?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let b = read_exact(r, 4, what)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

/// Load a checkpoint saved by [`save_checkpoint`]. Every model parameter
/// must be present with a matching shape.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(
        File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?,
    );
    let magic = read_exact(&mut r, 8, "magic")?;
    if magic != MAGIC {
        return Err(Error::Data(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let header_len = read_u32(&mut r, "header length")? as usize;
    let header_bytes = read_exact(&mut r, header_len, "header")?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;

    // Seed and scale values are irrelevant: every entry gets overwritten.
    let mut params = ModelParams::build(
        &header.config,
        0,
        ScaleParams::new(0.0, 0.0),
        ScaleParams::new(0.0, 0.0),
    )?;
    let mut seen = vec![false; params.len()];
    let mut aux = BTreeMap::new();

    let n_entries = read_u32(&mut r, "entry count")?;
    for _ in 0..n_entries {
        let name_len = read_u32(&mut r, "name length")? as usize;
        let name = String::from_utf8(read_exact(&mut r, name_len, "name")?)
            .map_err(|e| Error::Data(format!("checkpoint entry name: {e}")))?;
        let rank = read_u32(&mut r, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let b = read_exact(&mut r, 8, "dimension")?;
            shape.push(u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize);
        }
        let numel: usize = shape.iter().product::<usize>().max(1);
        let raw = read_exact(&mut r, numel * 8, &format!("data of {name}"))?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data)?;
        if let Some(stripped) = name.strip_prefix("aux.") {
            let _ = stripped;
            aux.insert(name, tensor);
        } else {
            let idx = params.index_of(&name)?;
            if seen[idx] {
                return Err(Error::Data(format!("duplicate checkpoint entry {name}")));
            }
            if params.param(idx).value.shape() != tensor.shape() {
                return Err(Error::Data(format!(
                    "checkpoint entry {name} has shape {:?}, config implies {:?}",
                    tensor.shape(),
                    params.param(idx).value.shape()
                )));
            }
            params.data_mut(idx).copy_from_slice(tensor.data());
            seen[idx] = true;
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Data(format!(
            "checkpoint is missing parameter {}",
            params.param(missing).name
        )));
    }
    Ok(Checkpoint {
        params,
        aux,
        meta: header.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, NetworkConfig};

    fn tiny_config() -> NetworkConfig {
        NetworkConfig {
            input_h: 8,
            input_w: 8,
            input_c: 1,
            stage_channels: vec![4, 8],
            units_per_stage: vec![1, 1],
            share_up_to_stage: 1,
            fuse_prev_pose: false,
            fuse_at_stage: 2,
            fc4_dim: 16,
            fc1_dim: 8,
            dropout_keep: 1.0,
            fuse_dropout_keep: 1.0,
            activation: Activation::Elu,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let params = ModelParams::build(
            &tiny_config(),
            42,
            ScaleParams::new(-1.25, -3.5),
            ScaleParams::new(0.75, -6.5),
        )
        .unwrap();
        let mut aux = BTreeMap::new();
        aux.insert(
            "aux.mean_image".to_string(),
            Tensor::new(vec![1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
        );
        let dir = std::env::temp_dir().join(format!("ckpt_test_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        let mut meta = BTreeMap::new();
        meta.insert("seed".to_string(), "42".to_string());
        save_checkpoint(&path, &params, &aux, &meta).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.params.config(), params.config());
        assert_eq!(loaded.meta.get("seed").map(String::as_str), Some("42"));
        for i in 0..params.len() {
            assert_eq!(loaded.params.param(i).name, params.param(i).name);
            assert_eq!(
                loaded.params.param(i).value.data(),
                params.param(i).value.data(),
                "parameter {} not bit-exact",
                params.param(i).name
            );
        }
        assert_eq!(
            loaded.aux["aux.mean_image"].data(),
            aux["aux.mean_image"].data()
        );
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn rejects_garbage() {
        let dir = std::env::temp_dir().join(format!("ckpt_bad_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(load_checkpoint(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
