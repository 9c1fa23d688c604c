//! On-disk checkpoints.
//!
//! Layout: magic `ESTCKPT1`, u32 LE header length, UTF-8 JSON header
//! `{format_version, global_step, variables:[{name, shape}]}`, the f64 LE
//! payload in header order, then the CRC32 of the payload as u32 LE.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Collection, Graph};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ESTCKPT1";
pub const FORMAT_VERSION: u32 = 1;
pub const INDEX_FILE: &str = "checkpoint";
pub const WRITER_FILE: &str = "checkpoint_writer";
pub const EXTENSION: &str = "estckpt";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub global_step: u64,
    /// In file order.
    pub variables: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    global_step: u64,
    variables: Vec<VarEntry>,
}

#[derive(Serialize, Deserialize)]
struct VarEntry {
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    /// Every variable except the global step and per-run local state.
    pub fn from_graph(g: &Graph) -> Checkpoint {
        let variables = g
            .snapshot()
            .into_iter()
            .filter(|(def, _)| {
                !matches!(def.collection, Collection::Local | Collection::GlobalStep)
            })
            .map(|(def, value)| (def.name, value))
            .collect();
        Checkpoint {
            global_step: g.global_step_value(),
            variables,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.variables
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Loads values by name into `g` and sets its global step. Every
    /// non-local graph variable must be present; extra entries are ignored.
    pub fn restore_into(&self, g: &mut Graph) -> Result<()> {
        for id in g.variables() {
            let def = g.var_def(id).clone();
            if matches!(def.collection, Collection::Local | Collection::GlobalStep) {
                continue;
            }
            let value = self.get(&def.name).ok_or_else(|| {
                Error::invalid(format!("checkpoint has no value for variable {}", def.name))
            })?;
            g.set_var_value(id, value.clone())?;
        }
        g.set_global_step(self.global_step);
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            global_step: self.global_step,
            variables: self
                .variables
                .iter()
                .map(|(name, t)| VarEntry {
                    name: name.clone(),
                    shape: t.dims().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut payload = Vec::new();
        for (_, t) in &self.variables {
            for x in t.data() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let corrupt = |reason: &str| Error::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = &bytes[12..];
        if body.len() < hlen + 4 {
            return Err(corrupt("truncated"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])
            .map_err(|e| corrupt(&format!("bad header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(corrupt(&format!(
                "unsupported format_version {}",
                header.format_version
            )));
        }
        let expected: usize = header
            .variables
            .iter()
            .map(|v| v.shape.iter().product::<usize>())
            .sum();
        let payload = &body[hlen..body.len() - 4];
        if payload.len() != expected * 8 {
            return Err(corrupt("truncated"));
        }
        let crc = u32::from_le_bytes(body[body.len() - 4..].try_into().expect("4 bytes"));
        if crc32fast::hash(payload) != crc {
            return Err(corrupt("CRC mismatch"));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let variables = header
            .variables
            .into_iter()
            .map(|v| {
                let n: usize = v.shape.iter().product();
                let data: Vec<f64> = values.by_ref().take(n).collect();
                Ok((v.name, Tensor::new(v.shape, data)?))
            })
            .collect::<Result<_>>()?;
        Ok(Checkpoint {
            global_step: header.global_step,
            variables,
        })
    }
}

/// Writes via a temp file in the same directory and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("tmp");
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes()?)
}

pub fn restore_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    Checkpoint::from_bytes(&bytes, path)
}

/// Step encoded in a `model.ckpt-<step>.estckpt` file name.
pub fn step_from_file_name(path: &Path) -> Option<u64> {
    let name = path.file_name()?.to_str()?;
    name.strip_prefix("model.ckpt-")?
        .strip_suffix(&format!(".{EXTENSION}"))?
        .parse()
        .ok()
}

/// Global step stored in a checkpoint's header.
pub fn checkpoint_step(path: &Path) -> Result<u64> {
    Ok(restore_checkpoint(path)?.global_step)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub latest: String,
    pub all_retained: Vec<String>,
}

pub fn checkpoint_file_name(step: u64) -> String {
    format!("model.ckpt-{step}.{EXTENSION}")
}

pub fn read_index(model_dir: &Path) -> Result<Option<CheckpointIndex>> {
    let path = model_dir.join(INDEX_FILE);
    match fs::read(&path) {
        Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Path of the newest checkpoint named by the index, if any.
pub fn latest_checkpoint(model_dir: &Path) -> Result<Option<PathBuf>> {
    Ok(read_index(model_dir)?.map(|i| model_dir.join(i.latest)))
}

/// Single-writer checkpoint directory with retention. The first writer to
/// save claims the directory in `checkpoint_writer`; any other writer id is
/// refused.
pub struct CheckpointManager {
    dir: PathBuf,
    keep_max: usize,
    writer_id: String,
    claimed: bool,
    last_saved: Option<u64>,
}

impl CheckpointManager {
    pub fn new(dir: &Path, keep_max: usize, writer_id: &str) -> Self {
        CheckpointManager {
            dir: dir.to_path_buf(),
            keep_max: keep_max.max(1),
            writer_id: writer_id.to_string(),
            claimed: false,
            last_saved: None,
        }
    }

    pub fn last_saved(&self) -> Option<u64> {
        self.last_saved
    }

    fn claim(&mut self) -> Result<()> {
        if self.claimed {
            return Ok(());
        }
        let path = self.dir.join(WRITER_FILE);
        match fs::read_to_string(&path) {
            Ok(owner) if owner.trim() != self.writer_id => {
                return Err(Error::LeaderViolation {
                    writer: self.writer_id.clone(),
                    owner: owner.trim().to_string(),
                })
            }
            Ok(_) => {}
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                write_atomic(&path, self.writer_id.as_bytes())?;
            }
            Err(e) => return Err(e.into()),
        }
        self.claimed = true;
        Ok(())
    }

    /// Writes the data file, then the index, then prunes old files.
    pub fn save(&mut self, ckpt: &Checkpoint) -> Result<PathBuf> {
        fs::create_dir_all(&self.dir)?;
        self.claim()?;
        let name = checkpoint_file_name(ckpt.global_step);
        let path = self.dir.join(&name);
        save_checkpoint(&path, ckpt)?;
        let mut index = read_index(&self.dir)?.unwrap_or_default();
        index.all_retained.retain(|n| n != &name);
        index.all_retained.push(name.clone());
        index.latest = name;
        let mut pruned = Vec::new();
        while index.all_retained.len() > self.keep_max {
            pruned.push(index.all_retained.remove(0));
        }
        write_atomic(
            &self.dir.join(INDEX_FILE),
            &serde_json::to_vec_pretty(&index)?,
        )?;
        for old in pruned {
            match fs::remove_file(self.dir.join(&old)) {
                Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e.into()),
                _ => {}
            }
        }
        self.last_saved = Some(ckpt.global_step);
        Ok(path)
    }
}
