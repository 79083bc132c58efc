//! Checkpoint files: one line of JSON header, then the raw little-endian
//! `f32` buffers concatenated in header order.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

const FORMAT: &str = "goalnav-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BufferEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config_hash: String,
    buffers: Vec<BufferEntry>,
    #[serde(default)]
    extra: serde_json::Value,
}

/// In-memory checkpoint contents.
#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub config_hash: String,
    pub buffers: Vec<(String, Tensor<f32>)>,
    pub extra: serde_json::Value,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore<f32>, config_hash: &str) -> Self {
        Self {
            config_hash: config_hash.to_string(),
            buffers: store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
            extra: serde_json::Value::Null,
        }
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor<f32>> {
        self.buffers.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every parameter of `store` from the identically named buffer.
    pub fn load_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        for p in store.iter_mut() {
            let t = self
                .buffer(&p.name)
                .ok_or_else(|| Error::config(format!("checkpoint lacks parameter {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::config(format!(
                    "parameter {} has shape {:?} in checkpoint, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        let header = Header {
            format: FORMAT.into(),
            version: VERSION,
            config_hash: self.config_hash.clone(),
            buffers: self
                .buffers
                .iter()
                .map(|(name, t)| BufferEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            extra: self.extra.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for (_, t) in &self.buffers {
            let mut bytes = Vec::with_capacity(t.numel() * 4);
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(format!("write {}", path.display()), e))
    }

    pub fn read_from(r: impl Read, origin: &Path) -> Result<Self> {
        let bad = |message: String| Error::Format {
            path: origin.to_path_buf(),
            message,
        };
        let mut r = BufReader::new(r);
        let mut line = Vec::new();
        r.read_until(b'\n', &mut line)
            .map_err(|e| Error::io(format!("read {}", origin.display()), e))?;
        let header: Header =
            serde_json::from_slice(&line).map_err(|e| bad(format!("bad header: {e}")))?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(bad(format!("unsupported format {} v{}", header.format, header.version)));
        }
        let mut buffers = Vec::with_capacity(header.buffers.len());
        for entry in header.buffers {
            let n: usize = entry.shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes)
                .map_err(|_| bad(format!("truncated buffer {}", entry.name)))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            buffers.push((entry.name, Tensor::new(entry.shape, data)?));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| Error::io("read trailer", e))? != 0 {
            return Err(bad("trailing bytes after last buffer".into()));
        }
        Ok(Self {
            config_hash: header.config_hash,
            buffers,
            extra: header.extra,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
        Self::read_from(file, path)
    }
}
