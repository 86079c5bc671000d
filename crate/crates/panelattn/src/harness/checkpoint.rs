//! Self-describing checkpoint container.
//!
//! Layout: an 8-byte magic, a little-endian u64 header length, a JSON
//! header (config, tensor index, optimizer metadata, RNG state), then the
//! payload — every tensor as f64 little-endian in index order, followed by
//! the optimizer's first and second moments when present. Values are
//! widened to f64 on save and narrowed on load, which round-trips both
//! supported network precisions bit-exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::nnet::{AdapterConfig, EncoderKind, Model, Real, Regime, VitConfig};
use crate::{Error, Result};

use super::config::Precision;
use super::optim::Adam;

const MAGIC: &[u8; 8] = b"PNLCKPT1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub group: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptimMeta {
    pub t: u64,
    pub len: u64,
}

/// Batch-sampling RNG state: streams are derived from `(seed, step)`, so
/// the position is fully described by the next step index.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub vit: VitConfig,
    pub encoder: EncoderKind,
    pub regime: Regime,
    pub adapter: AdapterConfig,
    pub adapter_seed: u64,
    pub grid: usize,
    pub precision: Precision,
    pub tensors: Vec<TensorMeta>,
    pub optimizer: Option<OptimMeta>,
    pub rng: RngState,
}

pub fn save_checkpoint<F: Real>(
    path: &Path,
    model: &Model<F>,
    grid: usize,
    adapter_seed: u64,
    precision: Precision,
    optimizer: Option<&Adam>,
    rng: RngState,
) -> Result<()> {
    let mut tensors = Vec::with_capacity(model.store.len());
    let mut offset = 0u64;
    for e in model.store.entries() {
        let len = e.value.len() as u64;
        tensors.push(TensorMeta {
            name: e.name.clone(),
            group: e.group.name().to_string(),
            shape: e.value.shape().to_vec(),
            offset,
            len,
        });
        offset += len;
    }
    let header = CheckpointHeader {
        vit: model.cfg,
        encoder: model.encoder,
        regime: model.regime,
        adapter: model.adapter,
        adapter_seed,
        grid,
        precision,
        tensors,
        optimizer: optimizer.map(|a| OptimMeta {
            t: a.t,
            len: a.m.len() as u64,
        }),
        rng,
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| Error::format(format!("header encode: {e}")))?;

    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    out.write_all(&header_bytes)?;
    for e in model.store.entries() {
        for v in e.value.iter() {
            out.write_all(&v.to64().to_le_bytes())?;
        }
    }
    if let Some(adam) = optimizer {
        for v in adam.m.iter().chain(adam.v.iter()) {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_header(reader: &mut impl Read) -> Result<CheckpointHeader> {
    let mut magic = [0u8; 8];
    reader.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format("not a checkpoint file (bad magic)".to_string()));
    }
    let mut len_bytes = [0u8; 8];
    reader.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    reader.read_exact(&mut header_bytes)?;
    serde_json::from_slice(&header_bytes).map_err(|e| Error::format(format!("header decode: {e}")))
}

/// Reads only the header (config inspection without loading tensors).
pub fn load_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let mut file = std::io::BufReader::new(fs::File::open(path)?);
    read_header(&mut file)
}

pub fn load_checkpoint<F: Real>(
    path: &Path,
) -> Result<(Model<F>, Option<Adam>, CheckpointHeader)> {
    let mut file = std::io::BufReader::new(fs::File::open(path)?);
    let header = read_header(&mut file)?;

    let mut model = Model::<F>::new(header.vit, header.encoder, 0)?;
    if header.regime != Regime::Full {
        model.attach_adapters(header.regime, header.adapter, header.adapter_seed)?;
    }
    if model.store.len() != header.tensors.len() {
        return Err(Error::format(format!(
            "checkpoint lists {} tensors, reconstructed model has {}",
            header.tensors.len(),
            model.store.len()
        )));
    }

    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    let total: u64 = header.tensors.iter().map(|t| t.len).sum();
    let optim_len = header.optimizer.map(|o| 2 * o.len).unwrap_or(0);
    if payload.len() as u64 != (total + optim_len) * 8 {
        return Err(Error::format(format!(
            "payload holds {} bytes, header promises {}",
            payload.len(),
            (total + optim_len) * 8
        )));
    }
    let read_f64 = |idx: u64| -> f64 {
        let b = &payload[(idx * 8) as usize..(idx * 8 + 8) as usize];
        f64::from_le_bytes(b.try_into().expect("8 bytes"))
    };

    for meta in &header.tensors {
        let id = model.store.find(&meta.name).ok_or_else(|| {
            Error::format(format!("checkpoint tensor {} has no slot in the model", meta.name))
        })?;
        let expect = model.store.entry(id).value.shape().to_vec();
        if expect != meta.shape {
            return Err(Error::shape(format!(
                "tensor {}: checkpoint shape {:?} vs model {:?}",
                meta.name, meta.shape, expect
            )));
        }
        let values: Vec<F> = (0..meta.len).map(|i| F::of(read_f64(meta.offset + i))).collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&meta.shape), values)
            .map_err(|e| Error::shape(e.to_string()))?;
        model.store.assign(id, arr)?;
    }

    let optimizer = header.optimizer.map(|o| {
        let base = total;
        let mut adam = Adam::new(o.len as usize);
        adam.t = o.t;
        for i in 0..o.len {
            adam.m[i as usize] = read_f64(base + i);
        }
        for i in 0..o.len {
            adam.v[i as usize] = read_f64(base + o.len + i);
        }
        adam
    });

    model.set_trainable(header.regime)?;
    Ok((model, optimizer, header))
}
