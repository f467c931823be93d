//! Checkpoint persistence.
//!
//! Layout: the magic `MOEMOE01`, a little-endian u64 header length, a JSON
//! header (run config, epoch, optimizer scalars, and a parameter manifest of
//! name / kind / shape / byte offset), the raw little-endian f64 arrays, and
//! a trailing 64-bit FNV-1a checksum of every preceding byte.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{stream_rng, streams, RunConfig};
use crate::model::Model;
use crate::moe::apply_placement;
use crate::optim::{AdamState, MomentPair};

pub const MAGIC: &[u8; 8] = b"MOEMOE01";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    NotACheckpoint,
    #[error("checkpoint version {found:?}, this build reads {expected:?}")]
    VersionMismatch { found: String, expected: String },
    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("structure mismatch: {0}")]
    Structure(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    kind: ArrayKind,
    shape: Vec<usize>,
    /// Offset in f64 elements from the start of the array section.
    offset: u64,
    len: u64,
    trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ArrayKind {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    run_config: RunConfig,
    epoch: usize,
    adam_step: u64,
    manifest: Vec<ManifestEntry>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Serialize model weights and optimizer state.
pub fn save(
    model: &Model,
    opt: &AdamState,
    run: &RunConfig,
    epoch: usize,
    path: &Path,
) -> Result<()> {
    let mut manifest = Vec::new();
    let mut arrays: Vec<f64> = Vec::new();
    let push = |name: &str, kind: ArrayKind, shape: Vec<usize>, trainable: bool,
                data: &[f64], arrays: &mut Vec<f64>, manifest: &mut Vec<ManifestEntry>| {
        manifest.push(ManifestEntry {
            name: name.to_string(),
            kind,
            shape,
            offset: arrays.len() as u64,
            len: data.len() as u64,
            trainable,
        });
        arrays.extend_from_slice(data);
    };
    model.visit_params(&mut |p| {
        push(
            &p.name,
            ArrayKind::Param,
            p.value.shape().to_vec(),
            p.trainable,
            p.value.data(),
            &mut arrays,
            &mut manifest,
        );
    });
    model.visit_params(&mut |p| {
        if let Some(pair) = opt.moments.get(&p.name) {
            push(
                &p.name,
                ArrayKind::AdamM,
                p.value.shape().to_vec(),
                p.trainable,
                &pair.m,
                &mut arrays,
                &mut manifest,
            );
            push(
                &p.name,
                ArrayKind::AdamV,
                p.value.shape().to_vec(),
                p.trainable,
                &pair.v,
                &mut arrays,
                &mut manifest,
            );
        }
    });

    let header = Header {
        run_config: run.clone(),
        epoch,
        adam_step: opt.step,
        manifest,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;

    let mut bytes = Vec::with_capacity(16 + header_json.len() + arrays.len() * 8 + 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for v in &arrays {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let checksum = fnv1a(&bytes);
    bytes.extend_from_slice(&checksum.to_le_bytes());
    std::fs::write(path, bytes)?;
    Ok(())
}

fn parse(bytes: &[u8]) -> Result<(Header, Vec<f64>)> {
    if bytes.len() < MAGIC.len() + 16 {
        return Err(CheckpointError::NotACheckpoint);
    }
    if &bytes[..6] != b"MOEMOE" {
        return Err(CheckpointError::NotACheckpoint);
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::VersionMismatch {
            found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
        });
    }
    let body_len = bytes.len() - 8;
    let stored = u64::from_le_bytes(bytes[body_len..].try_into().unwrap());
    let computed = fnv1a(&bytes[..body_len]);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16 + header_len;
    if header_end > body_len {
        return Err(CheckpointError::Header("header overruns file".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let payload = &bytes[header_end..body_len];
    if payload.len() % 8 != 0 {
        return Err(CheckpointError::Header(
            "array section is not a whole number of f64s".into(),
        ));
    }
    let arrays: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, arrays))
}

fn slice<'a>(arrays: &'a [f64], e: &ManifestEntry) -> Result<&'a [f64]> {
    let start = e.offset as usize;
    let end = start + e.len as usize;
    arrays.get(start..end).ok_or_else(|| {
        CheckpointError::Structure(format!("{}: array range {start}..{end} out of bounds", e.name))
    })
}

/// Rebuild the model and optimizer from a checkpoint.
pub fn load(path: &Path) -> Result<(Model, AdamState, RunConfig, usize)> {
    let bytes = std::fs::read(path)?;
    let (header, arrays) = parse(&bytes)?;
    let run = header.run_config.clone();

    let mut model = run
        .build_model()
        .map_err(|e| CheckpointError::Structure(e.to_string()))?;

    let mut params: HashMap<&str, &ManifestEntry> = HashMap::new();
    let mut moments_m: HashMap<&str, &ManifestEntry> = HashMap::new();
    let mut moments_v: HashMap<&str, &ManifestEntry> = HashMap::new();
    for e in &header.manifest {
        let map = match e.kind {
            ArrayKind::Param => &mut params,
            ArrayKind::AdamM => &mut moments_m,
            ArrayKind::AdamV => &mut moments_v,
        };
        map.insert(e.name.as_str(), e);
    }

    let mut missing: Vec<String> = Vec::new();
    let mut used = 0usize;
    let mut fill_err: Option<CheckpointError> = None;
    model.visit_params_mut(&mut |p| {
        let Some(entry) = params.get(p.name.as_str()) else {
            missing.push(p.name.clone());
            return;
        };
        used += 1;
        if entry.shape != p.value.shape() {
            fill_err.get_or_insert_with(|| {
                CheckpointError::Structure(format!(
                    "{}: shape {:?} in file, {:?} in model",
                    p.name,
                    entry.shape,
                    p.value.shape()
                ))
            });
            return;
        }
        match slice(&arrays, entry) {
            Ok(data) => {
                p.value.data_mut().copy_from_slice(data);
                p.trainable = entry.trainable;
                p.zero_grad();
            }
            Err(e) => {
                fill_err.get_or_insert(e);
            }
        }
    });
    if let Some(e) = fill_err {
        return Err(e);
    }
    if !missing.is_empty() {
        return Err(CheckpointError::Structure(format!(
            "model parameters missing from checkpoint: {}",
            missing.join(", ")
        )));
    }
    if used != params.len() {
        return Err(CheckpointError::Structure(format!(
            "checkpoint holds {} parameters, model uses {used}",
            params.len()
        )));
    }

    let mut opt = run.optimizer.adam_state();
    opt.step = header.adam_step;
    for (name, em) in &moments_m {
        let Some(ev) = moments_v.get(name) else {
            return Err(CheckpointError::Structure(format!(
                "{name}: first moment present without second moment"
            )));
        };
        opt.moments.insert(
            name.to_string(),
            MomentPair {
                m: slice(&arrays, em)?.to_vec(),
                v: slice(&arrays, ev)?.to_vec(),
            },
        );
    }

    Ok((model, opt, run, header.epoch))
}

/// Human-readable summary of a checkpoint's header and manifest.
pub fn inspect(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let (header, arrays) = parse(&bytes)?;
    let n_params: u64 = header
        .manifest
        .iter()
        .filter(|e| e.kind == ArrayKind::Param)
        .map(|e| e.len)
        .sum();
    let mut out = String::new();
    out.push_str(&format!(
        "format {}  epoch {}  adam step {}\n",
        String::from_utf8_lossy(MAGIC),
        header.epoch,
        header.adam_step
    ));
    out.push_str(&format!(
        "parameters: {n_params} f64 values across {} arrays ({} total f64s with optimizer state)\n",
        header.manifest.len(),
        arrays.len()
    ));
    out.push_str(&format!(
        "model: d={} heads={} enc={} dec={} k={} vocab={}  moe: {}\n",
        header.run_config.model.d_model,
        header.run_config.model.n_heads,
        header.run_config.model.n_enc_layers,
        header.run_config.model.n_dec_layers,
        header.run_config.model.k,
        header.run_config.model.vocab_size,
        if header.run_config.moe.enabled {
            format!(
                "{:?}/{:?}/{:?} n={} k_top={}",
                header.run_config.moe.site,
                header.run_config.moe.layers,
                header.run_config.moe.train_mode,
                header.run_config.moe.n_experts,
                header.run_config.moe.k_top
            )
        } else {
            "disabled".to_string()
        }
    ));
    for e in header.manifest.iter().filter(|e| e.kind == ArrayKind::Param) {
        out.push_str(&format!(
            "  {:<44} {:?}{}\n",
            e.name,
            e.shape,
            if e.trainable { "" } else { "  [frozen]" }
        ));
    }
    Ok(out)
}

/// Placement helper used when reconstructing ablation variants: applies the
/// configured experts to an already-trained model.
pub fn place_experts(model: &mut Model, run: &RunConfig) -> Result<()> {
    let mut rng = stream_rng(run.optimizer.seed, streams::PLACEMENT);
    apply_placement(
        model,
        &run.moe.placement(),
        &run.moe.moe_config(),
        &mut rng,
    )
    .map_err(|e| CheckpointError::Structure(e.to_string()))
}
