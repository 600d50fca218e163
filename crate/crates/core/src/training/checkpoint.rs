//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "NVCK" | u32 format version | u32 n | n bytes of JSON metadata
//! u32 tensor count, then per tensor:
//!     u16 name length | name | u8 trainable | u32 rows | u32 cols | rows*cols f32
//! u64 optimiser step | u32 moment count, then per moment:
//!     u32 parameter index | m tensor | v tensor     (rows, cols, f32 data)
//! u32 CRC-32 of every preceding byte
//! ```
//!
//! The metadata echoes the configuration that produced the weights plus
//! trainer position, so a reader can refuse a mismatched model.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::optim::Adam;
use crate::training::params::ParamStore;

pub const MAGIC: &[u8; 4] = b"NVCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// `sine` or `velocity`.
    pub task: String,
    /// Model configuration echo.
    pub model: serde_json::Value,
    /// Training configuration echo.
    pub train: serde_json::Value,
    /// Completed epochs.
    pub epoch: usize,
    /// Task-specific trainer state (loss scales, best score, ...).
    #[serde(default)]
    pub state: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub trainable: bool,
    pub value: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<StoredTensor>,
    pub adam_step: u64,
    pub moments: Vec<(usize, Tensor<f32>, Tensor<f32>)>,
}

fn put_tensor<T: Scalar>(buf: &mut Vec<u8>, t: &Tensor<T>) {
    buf.extend_from_slice(&(t.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(t.cols() as u32).to_le_bytes());
    for &v in t.data() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
}

impl Checkpoint {
    pub fn capture<T: Scalar>(meta: CheckpointMeta, store: &ParamStore<T>, adam: Option<&Adam<T>>) -> Self {
        let tensors = store
            .ids()
            .map(|id| StoredTensor {
                name: store.name(id).to_string(),
                trainable: store.is_trainable(id),
                value: store.get(id).cast(),
            })
            .collect();
        let (adam_step, moments) = match adam {
            Some(a) => (
                a.step_count(),
                a.moments().map(|(i, m, v)| (i, m.cast(), v.cast())).collect(),
            ),
            None => (0, Vec::new()),
        };
        Self {
            meta,
            tensors,
            adam_step,
            moments,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(&meta);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name);
            buf.push(u8::from(t.trainable));
            put_tensor(&mut buf, &t.value);
        }
        buf.extend_from_slice(&self.adam_step.to_le_bytes());
        buf.extend_from_slice(&(self.moments.len() as u32).to_le_bytes());
        for (i, m, v) in &self.moments {
            buf.extend_from_slice(&(*i as u32).to_le_bytes());
            put_tensor(&mut buf, m);
            put_tensor(&mut buf, v);
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        Ok(buf)
    }

    /// Writes through a temporary file in the same directory.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|message| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err("checksum mismatch (file is corrupt or truncated)".into());
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            ));
        }
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| format!("metadata: {e}"))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| "tensor name is not UTF-8".to_string())?;
            let trainable = r.take(1)?[0] != 0;
            let value = r.tensor()?;
            tensors.push(StoredTensor { name, trainable, value });
        }
        let adam_step = r.u64()?;
        let n_mom = r.u32()? as usize;
        let mut moments = Vec::with_capacity(n_mom);
        for _ in 0..n_mom {
            let i = r.u32()? as usize;
            moments.push((i, r.tensor()?, r.tensor()?));
        }
        if r.pos != body.len() {
            return Err(format!("{} unexpected trailing bytes", body.len() - r.pos));
        }
        Ok(Self {
            meta,
            tensors,
            adam_step,
            moments,
        })
    }

    /// Copies stored values into `store`, matching by name and shape.
    pub fn apply<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let src = self
                .tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Shape(format!("checkpoint lacks tensor `{name}`")))?;
            if src.value.shape() != store.get(id).shape() {
                return Err(Error::Shape(format!(
                    "tensor `{name}`: checkpoint {:?}, model {:?}",
                    src.value.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = src.value.cast();
        }
        Ok(())
    }

    pub fn restore_adam<T: Scalar>(&self, adam: &mut Adam<T>) {
        adam.restore(
            self.adam_step,
            self.moments.iter().map(|(i, m, v)| (*i, m.cast(), v.cast())).collect(),
        );
    }

    /// Decodes the model echo, failing when it differs from `expected`.
    pub fn check_model<C: Serialize + DeserializeOwned + PartialEq + std::fmt::Debug>(
        &self,
        expected: &C,
    ) -> Result<C> {
        let stored: C = serde_json::from_value(self.meta.model.clone())
            .map_err(|e| Error::Config(format!("checkpoint model configuration: {e}")))?;
        if &stored != expected {
            return Err(Error::Config(format!(
                "checkpoint was trained with a different model configuration:\n  checkpoint: {}\n  requested:  {}",
                serde_json::to_string(&self.meta.model)?,
                serde_json::to_string(expected)?
            )));
        }
        Ok(stored)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.buf.len() {
            return Err("unexpected end of data".into());
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> std::result::Result<Tensor<f32>, String> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let n = rows.checked_mul(cols).ok_or("tensor size overflow")?;
        let raw = self.take(n.checked_mul(4).ok_or("tensor size overflow")?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::from_vec(rows, cols, data).map_err(|e| e.to_string())
    }
}
