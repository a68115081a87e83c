//! Named parameter storage, the optimizer, and the checkpoint archive.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use super::{Tensor, TensorError};

/// Update rule applied by [`ParameterRegistry::optimizer_step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerConfig {
    /// Bias-corrected adaptive-moment estimation.
    Adam { beta1: f64, beta2: f64, eps: f64 },
    /// Plain gradient descent.
    Sgd,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct ParamEntry {
    value: Tensor,
    grad: Tensor,
    moment1: Tensor,
    moment2: Tensor,
    trainable: bool,
}

/// Learnable tensors plus non-trainable buffers (e.g. normalization running
/// statistics), addressed by name. Iteration order is insertion order, which
/// keeps optimizer sweeps and checkpoints deterministic.
pub struct ParameterRegistry {
    params: IndexMap<String, ParamEntry>,
    buffers: IndexMap<String, Tensor>,
    adam_step: u64,
    has_new_grads: bool,
}

impl ParameterRegistry {
    pub fn new() -> Self {
        ParameterRegistry {
            params: IndexMap::new(),
            buffers: IndexMap::new(),
            adam_step: 0,
            has_new_grads: false,
        }
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> Result<(), TensorError> {
        if self.params.contains_key(name) {
            return Err(TensorError::DuplicateParam { name: name.into() });
        }
        let shape = value.shape().to_vec();
        self.params.insert(
            name.to_string(),
            ParamEntry {
                value,
                grad: Tensor::zeros(&shape),
                moment1: Tensor::zeros(&shape),
                moment2: Tensor::zeros(&shape),
                trainable: true,
            },
        );
        Ok(())
    }

    pub fn register_buffer(&mut self, name: &str, value: Tensor) -> Result<(), TensorError> {
        if self.buffers.contains_key(name) {
            return Err(TensorError::DuplicateParam { name: name.into() });
        }
        self.buffers.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, TensorError> {
        self.params
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| TensorError::UnknownParam { name: name.into() })
    }

    /// Direct mutation hook; used by tests and by surgical edits like
    /// biasing a decoder head.
    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, TensorError> {
        self.params
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| TensorError::UnknownParam { name: name.into() })
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor, TensorError> {
        self.buffers
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam { name: name.into() })
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor) -> Result<(), TensorError> {
        let slot = self
            .buffers
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam { name: name.into() })?;
        if slot.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set_buffer",
                detail: format!("{:?} vs {:?}", slot.shape(), value.shape()),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params.get(name).map_or(false, |e| e.trainable)
    }

    /// Marks exactly the parameters selected by the predicate as trainable.
    pub fn set_trainable(&mut self, selector: impl Fn(&str) -> bool) {
        for (name, entry) in self.params.iter_mut() {
            entry.trainable = selector(name);
        }
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor, TensorError> {
        self.params
            .get(name)
            .map(|e| &e.grad)
            .ok_or_else(|| TensorError::UnknownParam { name: name.into() })
    }

    pub(crate) fn accumulate_grad(&mut self, name: &str, g: &Tensor) -> Result<(), TensorError> {
        let entry = self
            .params
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam { name: name.into() })?;
        for (o, v) in entry.grad.data_mut().iter_mut().zip(g.data()) {
            *o += v;
        }
        self.has_new_grads = true;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for entry in self.params.values_mut() {
            entry.grad.data_mut().fill(0.0);
        }
        self.has_new_grads = false;
    }

    /// Applies one optimizer update to every trainable parameter and zeroes
    /// all gradients. Errors if no backward has populated gradients since
    /// the previous step.
    pub fn optimizer_step(&mut self, learning_rate: f64, config: &OptimizerConfig) -> Result<(), TensorError> {
        if !self.has_new_grads {
            return Err(TensorError::StepBeforeBackward);
        }
        self.adam_step += 1;
        for entry in self.params.values_mut() {
            if !entry.trainable {
                entry.grad.data_mut().fill(0.0);
                continue;
            }
            match config {
                OptimizerConfig::Sgd => {
                    for (w, g) in entry.value.data_mut().iter_mut().zip(entry.grad.data()) {
                        *w -= learning_rate * g;
                    }
                }
                OptimizerConfig::Adam { beta1, beta2, eps } => {
                    let t = self.adam_step as i32;
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    for i in 0..entry.value.len() {
                        let g = entry.grad.data()[i];
                        let m = &mut entry.moment1.data_mut()[i];
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        let m = *m;
                        let v = &mut entry.moment2.data_mut()[i];
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let v = *v;
                        entry.value.data_mut()[i] -= learning_rate * (m / bc1) / ((v / bc2).sqrt() + eps);
                    }
                }
            }
            entry.grad.data_mut().fill(0.0);
        }
        self.has_new_grads = false;
        Ok(())
    }

    /// Serializes parameter values and buffers (not optimizer state) to the
    /// named-tensor archive at `path`.
    pub fn save(&self, path: &Path) -> Result<(), TensorError> {
        let mut entries: Vec<(String, Tensor)> = Vec::new();
        for (name, entry) in &self.params {
            entries.push((format!("p/{}", name), entry.value.clone()));
        }
        for (name, value) in &self.buffers {
            entries.push((format!("b/{}", name), value.clone()));
        }
        save_archive(path, &entries)
    }

    /// Rebuilds a registry from an archive written by [`save`](Self::save).
    /// Entries outside the `p/` and `b/` namespaces are ignored.
    pub fn load(path: &Path) -> Result<Self, TensorError> {
        let mut reg = ParameterRegistry::new();
        for (name, tensor) in load_archive(path)? {
            if let Some(p) = name.strip_prefix("p/") {
                reg.register(p, tensor)?;
            } else if let Some(b) = name.strip_prefix("b/") {
                reg.register_buffer(b, tensor)?;
            }
        }
        Ok(reg)
    }

    /// True when every parameter and buffer matches bit for bit.
    pub fn bitwise_eq(&self, other: &ParameterRegistry) -> bool {
        self.params.len() == other.params.len()
            && self.buffers.len() == other.buffers.len()
            && self.params.iter().all(|(name, e)| {
                other.params.get(name).map_or(false, |o| {
                    o.value.shape() == e.value.shape()
                        && o.value
                            .data()
                            .iter()
                            .zip(e.value.data())
                            .all(|(a, b)| a.to_bits() == b.to_bits())
                })
            })
            && self.buffers.iter().all(|(name, v)| {
                other.buffers.get(name).map_or(false, |o| {
                    o.shape() == v.shape()
                        && o.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits())
                })
            })
    }
}

impl Default for ParameterRegistry {
    fn default() -> Self {
        Self::new()
    }
}

const ARCHIVE_MAGIC: &[u8; 4] = b"NTA1";

/// Writes a named-tensor archive: magic, entry count, then per entry the
/// name length, UTF-8 name, rank, dimensions, and f64 payload, all
/// little-endian, followed by a SHA-256 checksum of everything before it.
pub fn save_archive(path: &Path, entries: &[(String, Tensor)]) -> Result<(), TensorError> {
    let mut body: Vec<u8> = Vec::new();
    body.extend_from_slice(ARCHIVE_MAGIC);
    body.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        body.extend_from_slice(&(name.len() as u32).to_le_bytes());
        body.extend_from_slice(name.as_bytes());
        body.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for d in tensor.shape() {
            body.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in tensor.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&body);
    let mut file = std::fs::File::create(path)?;
    file.write_all(&body)?;
    file.write_all(&digest)?;
    Ok(())
}

pub fn load_archive(path: &Path) -> Result<Vec<(String, Tensor)>, TensorError> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    if raw.len() < 40 {
        return Err(TensorError::BadArchive {
            reason: "file too short".into(),
        });
    }
    let (body, checksum) = raw.split_at(raw.len() - 32);
    if Sha256::digest(body).as_slice() != checksum {
        return Err(TensorError::ChecksumMismatch);
    }
    let mut cur = 0usize;
    let take = |cur: &mut usize, n: usize| -> Result<&[u8], TensorError> {
        if *cur + n > body.len() {
            return Err(TensorError::BadArchive {
                reason: "truncated entry".into(),
            });
        }
        let s = &body[*cur..*cur + n];
        *cur += n;
        Ok(s)
    };
    if take(&mut cur, 4)? != ARCHIVE_MAGIC {
        return Err(TensorError::BadArchive {
            reason: "bad magic".into(),
        });
    }
    let count = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut cur, name_len)?.to_vec()).map_err(|_| TensorError::BadArchive {
            reason: "non-UTF-8 entry name".into(),
        })?;
        let rank = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = take(&mut cur, n * 8)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    if cur != body.len() {
        return Err(TensorError::BadArchive {
            reason: "trailing bytes".into(),
        });
    }
    Ok(entries)
}
