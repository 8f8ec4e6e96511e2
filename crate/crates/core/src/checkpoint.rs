//! Binary checkpoint container: named tensors plus string metadata.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "MQVQCKPT" (8 bytes)
//! version: u32
//! tensor_count: u32
//! per tensor:
//!   name_len: u32, name: UTF-8 bytes
//!   dtype: u8 (0 = f32, 1 = f64)
//!   rank: u8
//!   dims: rank x u64
//!   payload: numel x dtype-width bytes
//! meta_count: u32
//! per entry: key_len u32, key, value_len u32, value (UTF-8)
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::NamedParams;
use crate::tensor::{Dtype, Scalar, Tensor};

pub const MAGIC: [u8; 8] = *b"MQVQCKPT";
pub const VERSION: u32 = 1;

/// One stored tensor, kept as raw bytes until a typed view is requested.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointTensor {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl CheckpointTensor {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.numel() * T::DTYPE.byte_width());
        for &v in t.values().iter() {
            v.write_le(&mut bytes);
        }
        CheckpointTensor {
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            bytes,
        }
    }

    /// Decode into element type `T`; the stored dtype must match.
    pub fn to_vec<T: Scalar>(&self, name: &str) -> Result<Vec<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::CkptDtypeMismatch { name: name.into() });
        }
        let w = self.dtype.byte_width();
        Ok(self.bytes.chunks_exact(w).map(T::read_le).collect())
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Named-tensor table plus metadata, in file order.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub tensors: Vec<(String, CheckpointTensor)>,
    pub meta: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&CheckpointTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn push_tensors<T: Scalar>(&mut self, named: &NamedParams<T>) {
        for (name, t) in named {
            self.tensors
                .push((name.clone(), CheckpointTensor::from_tensor(t)));
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[t.dtype.tag()])?;
            w.write_all(&[t.shape.len() as u8])?;
            for &d in &t.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            w.write_all(&t.bytes)?;
        }
        w.write_all(&(self.meta.len() as u32).to_le_bytes())?;
        for (k, v) in &self.meta {
            w.write_all(&(k.len() as u32).to_le_bytes())?;
            w.write_all(k.as_bytes())?;
            w.write_all(&(v.len() as u32).to_le_bytes())?;
            w.write_all(v.as_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize, context: &'static str| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::CkptTruncated { context });
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let magic = take(&mut pos, 8, "magic")?;
        if magic != MAGIC {
            let mut found = [0u8; 8];
            found.copy_from_slice(magic);
            return Err(Error::CkptBadMagic { found });
        }
        let version = u32::from_le_bytes(take(&mut pos, 4, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::CkptVersion {
                found: version,
                supported: VERSION,
            });
        }
        let count = u32::from_le_bytes(take(&mut pos, 4, "tensor count")?.try_into().unwrap());
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len =
                u32::from_le_bytes(take(&mut pos, 4, "tensor name length")?.try_into().unwrap());
            let name = std::str::from_utf8(take(&mut pos, name_len as usize, "tensor name")?)
                .map_err(|_| Error::CkptBadField {
                    context: "tensor name is not UTF-8",
                })?
                .to_string();
            let dtype = Dtype::from_tag(take(&mut pos, 1, "dtype")?[0]).ok_or(
                Error::CkptBadField {
                    context: "unknown dtype tag",
                },
            )?;
            let rank = take(&mut pos, 1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = u64::from_le_bytes(take(&mut pos, 8, "dimension")?.try_into().unwrap());
                shape.push(d as usize);
            }
            let numel: usize = shape.iter().product();
            let payload = take(&mut pos, numel * dtype.byte_width(), "tensor payload")?.to_vec();
            tensors.push((
                name,
                CheckpointTensor {
                    dtype,
                    shape,
                    bytes: payload,
                },
            ));
        }
        let meta_count = u32::from_le_bytes(take(&mut pos, 4, "meta count")?.try_into().unwrap());
        let mut meta = Vec::with_capacity(meta_count as usize);
        for _ in 0..meta_count {
            let klen = u32::from_le_bytes(take(&mut pos, 4, "meta key length")?.try_into().unwrap());
            let key = std::str::from_utf8(take(&mut pos, klen as usize, "meta key")?)
                .map_err(|_| Error::CkptBadField {
                    context: "meta key is not UTF-8",
                })?
                .to_string();
            let vlen =
                u32::from_le_bytes(take(&mut pos, 4, "meta value length")?.try_into().unwrap());
            let value = std::str::from_utf8(take(&mut pos, vlen as usize, "meta value")?)
                .map_err(|_| Error::CkptBadField {
                    context: "meta value is not UTF-8",
                })?
                .to_string();
            meta.push((key, value));
        }
        Ok(Checkpoint { tensors, meta })
    }
}

/// Read a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

/// Save named tensors with metadata.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    named: &NamedParams<T>,
    meta: &[(String, String)],
) -> Result<()> {
    let mut ckpt = Checkpoint {
        tensors: Vec::new(),
        meta: meta.to_vec(),
    };
    ckpt.push_tensors(named);
    ckpt.save(path)
}

/// Copy checkpoint values into existing model tensors, strict in both
/// directions: every stored name must exist in the model with the same
/// shape and dtype, and every model tensor must be present in the file.
/// Names prefixed `opt.` (optimizer state) and `aux.` (training bookkeeping)
/// are not model tensors and are skipped here.
pub fn load_into<T: Scalar>(ckpt: &Checkpoint, named: &NamedParams<T>) -> Result<()> {
    for (name, stored) in &ckpt.tensors {
        if name.starts_with("opt.") || name.starts_with("aux.") {
            continue;
        }
        let Some((_, target)) = named.iter().find(|(n, _)| n == name) else {
            return Err(Error::CkptUnknownTensor { name: name.clone() });
        };
        if stored.shape != target.shape() {
            return Err(Error::CkptShapeMismatch {
                name: name.clone(),
                expected: target.shape().to_vec(),
                got: stored.shape.clone(),
            });
        }
        let values = stored.to_vec::<T>(name)?;
        target.with_data_mut(|d| d.copy_from_slice(&values));
    }
    for (name, _) in named {
        if ckpt.tensor(name).is_none() {
            return Err(Error::CkptMissingTensor { name: name.clone() });
        }
    }
    Ok(())
}
