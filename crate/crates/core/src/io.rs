//! `LRT1` tensor files and JSON parameter manifests.
//!
//! Layout: the magic bytes `LRT1`, a little-endian `u32` rank, `rank`
//! little-endian `u32` extents, then the row-major `f64` payload (little-endian).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{BlockParams, Variant};
use crate::config::AttnConfig;
use crate::error::{Error, Result};
use crate::tensor::{Tensor, MAX_RANK};

pub const MAGIC: [u8; 4] = *b"LRT1";

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 8 * t.numel());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format(format!("truncated header at byte {at}")))
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 8 || bytes[..4] != MAGIC {
        return Err(Error::Format("missing LRT1 magic".into()));
    }
    let rank = read_u32(bytes, 4)? as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::Format(format!("unsupported rank {rank}")));
    }
    let shape = (0..rank)
        .map(|i| read_u32(bytes, 8 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 8 + 4 * rank;
    let numel: usize = shape.iter().product();
    let payload = &bytes[start..];
    if payload.len() != 8 * numel {
        return Err(Error::Format(format!(
            "shape {shape:?} needs {} payload bytes, found {}",
            8 * numel,
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
}

/// Describes one attention block saved as a set of `LRT1` files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockManifest {
    pub variant: Variant,
    pub config: AttnConfig,
    pub tensors: Vec<TensorEntry>,
}

/// Writes `<dir>/<prefix>.json` and one `<prefix>.<tensor>.lrt` per tensor.
pub fn save_block(dir: &Path, prefix: &str, params: &BlockParams, cfg: &AttnConfig) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    for (name, t) in params.named_tensors() {
        let file = format!("{prefix}.{name}.lrt");
        write_tensor(&dir.join(&file), t)?;
        tensors.push(TensorEntry {
            name: name.to_string(),
            file,
        });
    }
    let manifest = BlockManifest {
        variant: params.variant(),
        config: cfg.clone(),
        tensors,
    };
    let path = dir.join(format!("{prefix}.json"));
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(path)
}

/// Loads a block saved by [`save_block`] given its manifest path.
pub fn load_block(manifest_path: &Path) -> Result<(BlockParams, AttnConfig)> {
    let manifest: BlockManifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let tensors = manifest
        .tensors
        .iter()
        .map(|e| Ok((e.name.clone(), read_tensor(&dir.join(&e.file))?)))
        .collect::<Result<Vec<_>>>()?;
    let params = BlockParams::from_named(manifest.variant, &manifest.config, tensors)?;
    Ok((params, manifest.config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    #[test]
    fn byte_layout() {
        let t = Tensor::new(&[2], vec![1.0, -2.5]).unwrap();
        let b = encode_tensor(&t);
        assert_eq!(&b[..4], b"LRT1");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..20], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 28);
    }

    #[test]
    fn rejects_corrupt_files() {
        let t = Tensor::zeros(&[2, 3]).unwrap();
        let mut b = encode_tensor(&t);
        assert!(decode_tensor(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(decode_tensor(&b).is_err());
        let mut b = encode_tensor(&t);
        b[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(decode_tensor(&b).is_err());
    }

    #[test]
    fn block_save_load() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = AttnConfig::new(8, 2, 2.0, 3, 3);
        let p = BlockParams::init(Variant::Glmha, &cfg, &mut rng::seeded(1, 0)).unwrap();
        let path = save_block(dir.path(), "block0", &p, &cfg).unwrap();
        let (loaded, lcfg) = load_block(&path).unwrap();
        assert_eq!(loaded, p);
        assert_eq!(lcfg, cfg);
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(
            shape in prop::collection::vec(1usize..5, 1..=4),
            seed in any::<u64>(),
        ) {
            let mut r = rng::seeded(seed, 0);
            let t = Tensor::randn(&shape, 3.0, &mut r).unwrap();
            prop_assert_eq!(decode_tensor(&encode_tensor(&t)).unwrap(), t);
        }
    }
}
