//! Checkpoint files.
//!
//! Layout:
//!
//! ```text
//! R3DCKPT/1 <config-digest>\n
//! <name> <d0,d1,..> <count>\n      (one manifest line per buffer)
//! END\n
//! <count × f64 little-endian> for each manifest entry, in manifest order
//! ```
//!
//! Each parameter contributes its value plus `adam.m/`, `adam.v/` and
//! `adam.step/` buffers so a resumed run continues bit-exactly. Scalars under
//! `meta/` carry run state such as the global step and are not parameters.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "R3DCKPT/1";
pub const META_PREFIX: &str = "meta/";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub digest: String,
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, digest: &str) -> Self {
        let mut entries = Vec::with_capacity(store.len() * 4);
        for (_, p) in store.iter() {
            entries.push((p.name.clone(), p.value.clone()));
            entries.push((format!("adam.m/{}", p.name), p.first_moment.clone()));
            entries.push((format!("adam.v/{}", p.name), p.second_moment.clone()));
            entries.push((format!("adam.step/{}", p.name), Tensor::scalar(p.step as f64)));
        }
        Self {
            digest: digest.to_string(),
            entries,
        }
    }

    /// Records a run-state scalar under `meta/<key>`, replacing any old value.
    pub fn set_meta(&mut self, key: &str, value: f64) {
        let name = format!("{META_PREFIX}{key}");
        self.entries.retain(|(n, _)| *n != name);
        self.entries.push((name, Tensor::scalar(value)));
    }

    pub fn meta(&self, key: &str) -> Option<f64> {
        self.find(&format!("{META_PREFIX}{key}")).map(Tensor::item)
    }

    fn find(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies values and optimizer state into a store with identical layout.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<(), CheckpointError> {
        let expected = store.len() * 4;
        let found = self.entries.iter().filter(|(n, _)| !n.starts_with(META_PREFIX)).count();
        if found != expected {
            return Err(CheckpointError::Mismatch(format!("{found} buffers, model needs {expected}")));
        }
        for (_, p) in store.iter_mut() {
            let fetch = |name: String, like: &Tensor| -> Result<Tensor, CheckpointError> {
                let t = self
                    .find(&name)
                    .ok_or_else(|| CheckpointError::Mismatch(format!("missing {name}")))?;
                if t.shape() != like.shape() {
                    return Err(CheckpointError::Mismatch(format!(
                        "{name}: shape {:?}, model has {:?}",
                        t.shape(),
                        like.shape()
                    )));
                }
                Ok(t.clone())
            };
            p.value = fetch(p.name.clone(), &p.value)?;
            p.first_moment = fetch(format!("adam.m/{}", p.name), &p.first_moment)?;
            p.second_moment = fetch(format!("adam.v/{}", p.name), &p.second_moment)?;
            let step = fetch(format!("adam.step/{}", p.name), &Tensor::scalar(0.0))?.item();
            if step < 0.0 || step.fract() != 0.0 {
                return Err(CheckpointError::Format(format!("bad step count {step}")));
            }
            p.step = step as u64;
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), CheckpointError> {
        if self.digest.is_empty() || self.digest.contains(char::is_whitespace) {
            return Err(CheckpointError::Format(format!("bad digest {:?}", self.digest)));
        }
        writeln!(w, "{CHECKPOINT_MAGIC} {}", self.digest)?;
        for (name, t) in &self.entries {
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(CheckpointError::Format(format!("bad buffer name {name:?}")));
            }
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            writeln!(w, "{name} {} {}", dims.join(","), t.numel())?;
        }
        writeln!(w, "END")?;
        for (_, t) in &self.entries {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self, CheckpointError> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header = line.trim_end_matches('\n');
        let digest = header
            .strip_prefix(CHECKPOINT_MAGIC)
            .and_then(|rest| rest.strip_prefix(' '))
            .filter(|d| !d.is_empty())
            .ok_or_else(|| CheckpointError::Format(format!("bad header {header:?}")))?
            .to_string();

        let mut manifest = Vec::new();
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(CheckpointError::Format("manifest not terminated".into()));
            }
            let entry = line.trim_end_matches('\n');
            if entry == "END" {
                break;
            }
            let fields: Vec<&str> = entry.split(' ').collect();
            let [name, dims, count] = fields[..] else {
                return Err(CheckpointError::Format(format!("bad manifest line {entry:?}")));
            };
            let shape = dims
                .split(',')
                .map(str::parse::<usize>)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CheckpointError::Format(format!("{name}: {e}")))?;
            let count: usize = count
                .parse()
                .map_err(|e| CheckpointError::Format(format!("{name}: {e}")))?;
            if shape.iter().product::<usize>() != count {
                return Err(CheckpointError::Format(format!("{name}: count disagrees with shape")));
            }
            manifest.push((name.to_string(), shape, count));
        }

        let mut entries = Vec::with_capacity(manifest.len());
        let mut buf = [0u8; 8];
        for (name, shape, count) in manifest {
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                r.read_exact(&mut buf)
                    .map_err(|_| CheckpointError::Format(format!("{name}: truncated buffer")))?;
                data.push(f64::from_le_bytes(buf));
            }
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Format(format!("{name}: {e}")))?;
            entries.push((name, t));
        }
        if r.read(&mut buf)? != 0 {
            return Err(CheckpointError::Format("trailing bytes after buffers".into()));
        }
        Ok(Self { digest, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::read_from(File::open(path)?)
    }
}
