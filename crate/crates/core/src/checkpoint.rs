//! Checkpoint archive: cascade config, epoch counter, every parameter tensor
//! and the Adam moments, in one little-endian binary file. Round trips are
//! bit-exact.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::cascade::{CascadeConfig, CascadeModel};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, ParamStore};

const MAGIC: &[u8; 8] = b"NSEGCKP1";

#[derive(Serialize, Deserialize)]
struct Meta {
    cascade: CascadeConfig,
    epoch: usize,
    adam: AdamConfig,
    adam_step: u64,
    shapes: Vec<Vec<usize>>,
}

/// A checkpoint loaded back into memory.
pub struct LoadedCheckpoint {
    pub cascade_cfg: CascadeConfig,
    pub model: CascadeModel,
    pub store: ParamStore,
    pub adam: Adam,
    pub epoch: usize,
}

pub fn save_checkpoint(
    path: &Path,
    cascade_cfg: &CascadeConfig,
    store: &ParamStore,
    adam: &Adam,
    epoch: usize,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    let meta = Meta {
        cascade: *cascade_cfg,
        epoch,
        adam: adam.cfg,
        adam_step: adam.step,
        shapes: store.iter().map(|(_, t)| t.shape.clone()).collect(),
    };
    let meta_bytes =
        serde_json::to_vec(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    w.write_u64::<LittleEndian>(meta_bytes.len() as u64)?;
    w.write_all(&meta_bytes)?;
    for (_, t) in store.iter() {
        for &v in &t.data {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    let (m, v) = adam.moments();
    for buf in m.iter().chain(v.iter()) {
        for &x in buf {
            w.write_f64::<LittleEndian>(x)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let mut r = BufReader::new(
        std::fs::File::open(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?,
    );
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint file", path.display())));
    }
    let meta_len = r.read_u64::<LittleEndian>()? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes)?;
    let meta: Meta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::Checkpoint(format!("corrupt metadata: {e}")))?;

    // Rebuild the parameter structure from the config (the init RNG is
    // irrelevant, every value is overwritten), then verify shapes.
    let mut store = ParamStore::new();
    let model = CascadeModel::build(meta.cascade, &mut store, &mut ChaCha12Rng::seed_from_u64(0))?;
    let stored_shapes: Vec<Vec<usize>> = store.iter().map(|(_, t)| t.shape.clone()).collect();
    if stored_shapes != meta.shapes {
        return Err(Error::Checkpoint(
            "parameter shapes in file do not match the cascade config".into(),
        ));
    }
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in &ids {
        let data = store.data_mut(*id);
        for slot in data.iter_mut() {
            *slot = r.read_f64::<LittleEndian>()?;
        }
    }
    let read_moments = |r: &mut BufReader<std::fs::File>, store: &ParamStore| -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(store.len());
        for (_, t) in store.iter() {
            let mut buf = vec![0.0f64; t.data.len()];
            for slot in buf.iter_mut() {
                *slot = r.read_f64::<LittleEndian>()?;
            }
            out.push(buf);
        }
        Ok(out)
    };
    let m = read_moments(&mut r, &store)?;
    let v = read_moments(&mut r, &store)?;
    let adam = Adam::restore(&store, meta.adam, meta.adam_step, m, v)?;

    Ok(LoadedCheckpoint { cascade_cfg: meta.cascade, model, store, adam, epoch: meta.epoch })
}

/// Loads a checkpoint and rejects it when its architecture differs from the
/// expected config (resume path).
pub fn load_checkpoint_expecting(path: &Path, expected: &CascadeConfig) -> Result<LoadedCheckpoint> {
    let loaded = load_checkpoint(path)?;
    if loaded.cascade_cfg != *expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint was trained with {:?}, run config expects {:?}",
            loaded.cascade_cfg, expected
        )));
    }
    Ok(loaded)
}
