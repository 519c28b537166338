//! Versioned binary checkpoint container.
//!
//! Layout (little endian): magic `CASTCKPT`, `u32` version, `u64` length
//! and bytes of a JSON metadata block, then the parameter tensors, then the
//! optimizer state. A tensor is `u32` name length, name, `u32` rank, `u64`
//! dims, and row-major `f64` values.

use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::data::{EdgeScaler, Normalizer};
use crate::error::Error;
use crate::model::{CastModel, ModelConfig, ModelDims};
use crate::tensor::{Adam, NdArray, ParamStore};

const MAGIC: &[u8; 8] = b"CASTCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub dims: ModelDims,
    pub dataset: String,
    /// Manifest used for training, if it came from disk.
    pub manifest: Option<PathBuf>,
    pub normalizer: Normalizer,
    pub edge_scaler: EdgeScaler,
    pub usage: Vec<u64>,
    pub best_epoch: Option<usize>,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
    pub adam: Adam,
}

type Io<T> = std::io::Result<T>;

fn put_str(w: &mut impl Write, s: &str) -> Io<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn put_tensor(w: &mut impl Write, name: &str, a: &NdArray) -> Io<()> {
    put_str(w, name)?;
    w.write_u32::<LittleEndian>(a.rank() as u32)?;
    for &d in a.shape() {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    for &v in a.data() {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn get_str(r: &mut impl Read) -> Result<String, Error> {
    let n = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let mut buf = vec![0; n];
    r.read_exact(&mut buf).map_err(truncated)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))
}

fn get_tensor(r: &mut impl Read) -> Result<(String, NdArray), Error> {
    let name = get_str(r)?;
    let rank = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    if rank > 8 {
        return Err(Error::Checkpoint(format!("tensor `{name}` has implausible rank {rank}")));
    }
    let shape = (0..rank)
        .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
        .collect::<Io<Vec<_>>>()
        .map_err(truncated)?;
    let n: usize = shape.iter().product();
    let mut data = vec![0.0; n];
    r.read_f64_into::<LittleEndian>(&mut data).map_err(truncated)?;
    let a = NdArray::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
    Ok((name, a))
}

fn truncated(e: std::io::Error) -> Error {
    Error::Checkpoint(format!("truncated or corrupt checkpoint: {e}"))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, Error> {
        let mut w = Vec::new();
        let meta = crate::report::to_json(&self.meta)?;
        let io = |e: std::io::Error| Error::Checkpoint(e.to_string());
        (|| -> Io<()> {
            w.write_all(MAGIC)?;
            w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
            w.write_u64::<LittleEndian>(meta.len() as u64)?;
            w.write_all(meta.as_bytes())?;
            w.write_u32::<LittleEndian>(self.params.len() as u32)?;
            for (name, a) in self.params.iter() {
                put_tensor(&mut w, name, a)?;
            }
            let a = &self.adam;
            w.write_u64::<LittleEndian>(a.step)?;
            for v in [a.lr, a.beta1, a.beta2, a.eps] {
                w.write_f64::<LittleEndian>(v)?;
            }
            w.write_u32::<LittleEndian>(a.first_moment.len() as u32)?;
            for (name, m) in &a.first_moment {
                put_tensor(&mut w, name, m)?;
                put_tensor(&mut w, name, &a.second_moment[name])?;
            }
            Ok(())
        })()
        .map_err(io)?;
        Ok(w)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, Error> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let len = r.read_u64::<LittleEndian>().map_err(truncated)? as usize;
        if len > bytes.len() {
            return Err(Error::Checkpoint("metadata length exceeds file size".into()));
        }
        let mut meta = vec![0; len];
        r.read_exact(&mut meta).map_err(truncated)?;
        let meta: CheckpointMeta =
            serde_json::from_slice(&meta).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let count = r.read_u32::<LittleEndian>().map_err(truncated)?;
        let mut params = ParamStore::default();
        for _ in 0..count {
            let (name, a) = get_tensor(&mut r)?;
            params.insert(name, a);
        }
        let step = r.read_u64::<LittleEndian>().map_err(truncated)?;
        let mut hyper = [0.0; 4];
        r.read_f64_into::<LittleEndian>(&mut hyper).map_err(truncated)?;
        let mut adam = Adam::with_betas(hyper[0], hyper[1], hyper[2], hyper[3]);
        adam.step = step;
        let moments = r.read_u32::<LittleEndian>().map_err(truncated)?;
        let (mut first, mut second) = (BTreeMap::new(), BTreeMap::new());
        for _ in 0..moments {
            let (name, m) = get_tensor(&mut r)?;
            let (_, v) = get_tensor(&mut r)?;
            first.insert(name.clone(), m);
            second.insert(name, v);
        }
        adam.first_moment = first;
        adam.second_moment = second;
        if (r.position() as usize) != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after optimizer state".into()));
        }
        Ok(Self { meta, params, adam })
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuild the model and check every stored tensor against its layout.
    pub fn model(&self) -> Result<CastModel, Error> {
        let (model, fresh) = CastModel::new(self.meta.config.clone(), self.meta.dims)?;
        if fresh.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.params.len(),
                fresh.len()
            )));
        }
        for (name, a) in fresh.iter() {
            match self.params.get(name) {
                Some(p) if p.shape() == a.shape() => {}
                Some(p) => {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{name}` has shape {:?}, model expects {:?}",
                        p.shape(),
                        a.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing tensor `{name}`"))),
            }
        }
        Ok(model)
    }
}
