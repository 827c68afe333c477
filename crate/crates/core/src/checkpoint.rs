//! Checkpoint directory format.
//!
//! A checkpoint is a directory of three files:
//!   manifest.toml      format version, phase, iteration, seed, config digest,
//!                      file list, and the fully resolved training config
//!   weights.bin        every parameter tensor plus optimizer moments
//!   loss_history.csv   the logged loss reports, one row per logged iteration
//!
//! weights.bin layout (little endian): magic "RLWT", u32 format number,
//! u64 tensor count, then per tensor: u32 name length, utf-8 name, u32 rank,
//! u64 dims, f64 data. Optimizer moments are stored under `opt.m.` / `opt.v.`
//! prefixes and the step counter under `opt.step`, so one archive restores
//! training exactly. Sampling streams are derived from (seed, purpose, index),
//! so seed plus iteration is the complete RNG state.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::Error;
use crate::tensor::{Data, ParamSet};
use crate::training::{LossReport, Optimizer};
use crate::Result;

pub const FORMAT_VERSION: &str = "1.0.0";
const WEIGHTS_MAGIC: &[u8; 4] = b"RLWT";
const WEIGHTS_FORMAT: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const HISTORY_FILE: &str = "loss_history.csv";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: String,
    phase: u8,
    iteration: u64,
    seed: u64,
    config_digest: String,
    files: Vec<String>,
    config: TrainConfig,
}

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub config: TrainConfig,
    pub iteration: usize,
    pub params: ParamSet,
    pub opt: Optimizer,
    pub history: Vec<LossReport>,
}

fn ck_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::checkpoint(path.display().to_string(), reason.into())
}

fn write_weights(path: &Path, tensors: &IndexMap<String, Data>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path.display().to_string(), e);
    w.write_all(WEIGHTS_MAGIC).map_err(io)?;
    w.write_all(&WEIGHTS_FORMAT.to_le_bytes()).map_err(io)?;
    w.write_all(&(tensors.len() as u64).to_le_bytes()).map_err(io)?;
    for (name, value) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&(value.ndim() as u32).to_le_bytes()).map_err(io)?;
        for d in value.shape() {
            w.write_all(&(*d as u64).to_le_bytes()).map_err(io)?;
        }
        for x in value.iter() {
            w.write_all(&x.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

fn read_weights(path: &Path) -> Result<IndexMap<String, Data>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let io = |e: std::io::Error| Error::io(path.display().to_string(), e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != WEIGHTS_MAGIC {
        return Err(ck_err(path, "weights file has a wrong magic number"));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4).map_err(io)?;
    let format = u32::from_le_bytes(buf4);
    if format != WEIGHTS_FORMAT {
        return Err(ck_err(path, format!("unsupported weights format {format}")));
    }
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8).map_err(io)?;
    let count = u64::from_le_bytes(buf8) as usize;

    let mut out = IndexMap::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut buf4).map_err(io)?;
        let name_len = u32::from_le_bytes(buf4) as usize;
        if name_len > 4096 {
            return Err(ck_err(path, "tensor name length is implausible"));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(io)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| ck_err(path, "tensor name is not valid utf-8"))?;
        r.read_exact(&mut buf4).map_err(io)?;
        let rank = u32::from_le_bytes(buf4) as usize;
        if rank > 8 {
            return Err(ck_err(path, format!("tensor {name} has implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut buf8).map_err(io)?;
            shape.push(u64::from_le_bytes(buf8) as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut buf8).map_err(io)?;
            data.push(f64::from_le_bytes(buf8));
        }
        let arr = ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&shape), data)
            .map_err(|_| ck_err(path, format!("tensor {name} has an inconsistent shape")))?;
        out.insert(name, arr.into_shared());
    }
    Ok(out)
}

fn write_history(path: &Path, history: &[LossReport]) -> Result<()> {
    let mut text = String::from("iteration,lr,total,rec,retinex,dif_r,dif_l\n");
    for h in history {
        let get = |k: &str| h.components.get(k).copied().unwrap_or(0.0);
        text.push_str(&format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e}\n",
            h.iteration,
            h.lr,
            h.total,
            get("rec"),
            get("retinex"),
            get("dif_r"),
            get("dif_l")
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_history(path: &Path) -> Result<Vec<LossReport>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(ck_err(path, format!("history row {i} has {} fields", fields.len())));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| ck_err(path, format!("bad number {s:?} in row {i}")))
        };
        out.push(LossReport {
            iteration: num(fields[0])? as usize,
            lr: num(fields[1])?,
            total: num(fields[2])?,
            components: IndexMap::from_iter([
                ("rec".to_string(), num(fields[3])?),
                ("retinex".to_string(), num(fields[4])?),
                ("dif_r".to_string(), num(fields[5])?),
                ("dif_l".to_string(), num(fields[6])?),
            ]),
        });
    }
    Ok(out)
}

/// Writes the full training state. The directory is created if needed;
/// existing files are replaced, so repeated saves with identical state are
/// byte-identical.
pub fn save(
    dir: &Path,
    cfg: &TrainConfig,
    iteration: usize,
    params: &ParamSet,
    opt: &Optimizer,
    history: &[LossReport],
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;

    let mut tensors: IndexMap<String, Data> = IndexMap::new();
    for (name, value) in params.iter() {
        tensors.insert(name.clone(), value.clone());
    }
    for (name, value) in opt.m.iter() {
        tensors.insert(format!("opt.m.{name}"), value.clone());
    }
    for (name, value) in opt.v.iter() {
        tensors.insert(format!("opt.v.{name}"), value.clone());
    }
    tensors.insert("opt.step".to_string(), crate::tensor::scalar(opt.step as f64));
    write_weights(&dir.join(WEIGHTS_FILE), &tensors)?;
    write_history(&dir.join(HISTORY_FILE), history)?;

    let manifest = Manifest {
        format_version: FORMAT_VERSION.to_string(),
        phase: cfg.phase,
        iteration: iteration as u64,
        seed: cfg.seed,
        config_digest: cfg.digest(),
        files: vec![WEIGHTS_FILE.to_string(), HISTORY_FILE.to_string()],
        config: cfg.clone(),
    };
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| ck_err(dir, format!("manifest serialization failed: {e}")))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

fn major_version(v: &str) -> Option<u64> {
    v.split('.').next()?.parse().ok()
}

/// Reads and fully validates a checkpoint directory.
pub fn load(dir: &Path) -> Result<LoadedCheckpoint> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let manifest: Manifest = toml::from_str(&text)
        .map_err(|e| ck_err(&manifest_path, format!("manifest parse failed: {e}")))?;

    let own_major = major_version(FORMAT_VERSION).expect("const version");
    match major_version(&manifest.format_version) {
        Some(m) if m == own_major => {}
        _ => {
            return Err(ck_err(
                &manifest_path,
                format!(
                    "format version {} is incompatible with {}",
                    manifest.format_version, FORMAT_VERSION
                ),
            ));
        }
    }
    if manifest.config.digest() != manifest.config_digest {
        return Err(ck_err(
            &manifest_path,
            "config digest mismatch; the manifest was altered after saving",
        ));
    }

    let tensors = read_weights(&dir.join(WEIGHTS_FILE))?;
    let mut params = ParamSet::new();
    let mut m = ParamSet::new();
    let mut v = ParamSet::new();
    let mut step = None;
    for (name, value) in tensors {
        if name == "opt.step" {
            step = Some(value.iter().next().copied().unwrap_or(0.0) as usize);
        } else if let Some(rest) = name.strip_prefix("opt.m.") {
            m.insert(rest.to_string(), value);
        } else if let Some(rest) = name.strip_prefix("opt.v.") {
            v.insert(rest.to_string(), value);
        } else {
            params.insert(name, value);
        }
    }
    let step =
        step.ok_or_else(|| ck_err(dir, "weights archive is missing the optimizer step"))?;
    for name in params.names() {
        if !m.contains(name) || !v.contains(name) {
            return Err(ck_err(dir, format!("optimizer moments missing for {name}")));
        }
    }

    let history = read_history(&dir.join(HISTORY_FILE))?;
    let cfg = manifest.config;
    let opt = Optimizer {
        m,
        v,
        step,
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
    };
    Ok(LoadedCheckpoint {
        iteration: manifest.iteration as usize,
        config: cfg,
        params,
        opt,
        history,
    })
}

/// Digest of the weights archive, used to compare checkpoints for identity.
pub fn weights_digest(dir: &Path) -> Result<String> {
    use sha2::Digest;
    let path = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut hasher = sha2::Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}
