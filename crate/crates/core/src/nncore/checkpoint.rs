//! Checkpoint file format: magic, length-framed JSON header, then the
//! parameter blob as little-endian f32 in declaration order.

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::nncore::model::{Model, ModelConfig};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"AWRCKPT1";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    epoch: usize,
    seed: u64,
}

pub fn save(model: &Model, epoch: usize, seed: u64, path: &Path) -> Result<()> {
    let header = CheckpointHeader { model: model.cfg.clone(), epoch, seed };
    let hbytes = serde_json::to_vec(&header)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(hbytes.len() as u32).to_le_bytes())?;
    f.write_all(&hbytes)?;
    let mut blob = Vec::with_capacity(model.params.len() * 4);
    for &p in &model.params {
        blob.extend_from_slice(&(p as f32).to_le_bytes());
    }
    f.write_all(&blob)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, usize, u64)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Format(format!("{} is not a checkpoint", path.display())));
    }
    let hlen = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    if bytes.len() < 12 + hlen {
        return Err(Error::Format("checkpoint header truncated".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..12 + hlen])?;
    // Rebuild the architecture, then overwrite every parameter from the blob.
    let mut model = Model::init(header.model, header.seed)?;
    let blob = &bytes[12 + hlen..];
    if blob.len() != model.params.len() * 4 {
        return Err(Error::Format(format!(
            "checkpoint blob holds {} bytes, expected {} for {} params",
            blob.len(),
            model.params.len() * 4,
            model.params.len()
        )));
    }
    for (p, chunk) in model.params.iter_mut().zip(blob.chunks_exact(4)) {
        *p = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
    }
    Ok((model, header.epoch, header.seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::repcodec::{RepTag, RepType};

    fn cfg() -> ModelConfig {
        ModelConfig {
            rep: RepType::new(RepTag::O3),
            n_joints: 4,
            input_size: 16,
            dense_size: 8,
            channels: vec![4, 6],
            trunk_layers: 1,
            cube_side_mm: 250.0,
        }
    }

    #[test]
    fn round_trip_preserves_config_and_params() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::init(cfg(), 33).unwrap();
        let path = dir.path().join("model.ckpt");
        save(&model, 17, 33, &path).unwrap();
        let (back, epoch, seed) = load(&path).unwrap();
        assert_eq!(epoch, 17);
        assert_eq!(seed, 33);
        assert_eq!(back.cfg, model.cfg);
        assert_eq!(back.params.len(), model.params.len());
        for (a, b) in model.params.iter().zip(&back.params) {
            assert!((a - b).abs() < 1e-7); // f32 storage
        }
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::init(cfg(), 5).unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save(&model, 3, 5, &p1).unwrap();
        save(&model, 3, 5, &p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(matches!(load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_truncated_blob() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::init(cfg(), 1).unwrap();
        let path = dir.path().join("model.ckpt");
        save(&model, 0, 1, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(&path), Err(Error::Format(_))));
    }
}
