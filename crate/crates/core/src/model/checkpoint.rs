//! Versioned checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"BYTEFUSE" | u32 version | u64 header_len | header JSON
//! u32 n_params    | n_params × tensor
//! u32 n_optimizer | n_optimizer × tensor
//! tensor := u32 name_len | name UTF-8 | u32 ndim | ndim × u64 dim | f32 data
//! ```
//!
//! The header holds the model config, the step counter and free-form
//! string metadata.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

use super::{ModelConfig, ModelError, Seq2Seq};

pub const MAGIC: &[u8; 8] = b"BYTEFUSE";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    meta: BTreeMap<String, String>,
}

pub type NamedTensors = Vec<(String, Tensor<f32>)>;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub meta: BTreeMap<String, String>,
    pub params: NamedTensors,
    pub optimizer: NamedTensors,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn from_model(model: &Seq2Seq<f32>, optimizer: NamedTensors, step: u64) -> Self {
        Self {
            config: model.config().clone(),
            step,
            meta: BTreeMap::new(),
            params: model.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            optimizer,
        }
    }

    /// Rebuild the model, checking that every parameter implied by the
    /// config is present exactly once with the right shape.
    pub fn to_model(&self) -> Result<Seq2Seq<f32>, ModelError> {
        let mut model = Seq2Seq::<f32>::new(self.config.clone(), 0)?;
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for (name, _) in &self.params {
            *seen.entry(name.as_str()).or_default() += 1;
        }
        if let Some((name, _)) = seen.iter().find(|(_, &c)| c > 1) {
            return Err(bad(format!("parameter {name} stored more than once")));
        }
        let expected: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
        for name in &expected {
            if !seen.contains_key(name.as_str()) {
                return Err(bad(format!("missing parameter {name}")));
            }
        }
        if self.params.len() != expected.len() {
            let extra = self
                .params
                .iter()
                .find(|(n, _)| model.params().id(n).is_none())
                .map(|(n, _)| n.clone())
                .unwrap_or_default();
            return Err(bad(format!("unexpected parameter {extra}")));
        }
        for (name, value) in &self.params {
            model.params_mut().set(name, value.clone())?;
        }
        Ok(model)
    }

    pub fn optimizer_tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.optimizer.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), ModelError> {
        let header = serde_json::to_vec_pretty(&Header {
            config: self.config.clone(),
            step: self.step,
            meta: self.meta.clone(),
        })
        .map_err(|e| bad(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for section in [&self.params, &self.optimizer] {
            w.write_all(&(section.len() as u32).to_le_bytes())?;
            for (name, t) in section {
                write_tensor(w, name, t)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, ModelError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let header_len = read_u64(r)? as usize;
        let mut header = vec![0u8; header_len];
        r.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header).map_err(|e| bad(e.to_string()))?;
        let mut sections = Vec::with_capacity(2);
        for _ in 0..2 {
            let n = read_u32(r)? as usize;
            let mut tensors = Vec::with_capacity(n);
            for _ in 0..n {
                tensors.push(read_tensor(r)?);
            }
            sections.push(tensors);
        }
        let optimizer = sections.pop().unwrap_or_default();
        let params = sections.pop().unwrap_or_default();
        Ok(Self {
            config: header.config,
            step: header.step,
            meta: header.meta,
            params,
            optimizer,
        })
    }

    /// Write to a sibling temporary file, then rename over `path`.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut r = BufReader::new(fs::File::open(path)?);
        Self::read_from(&mut r)
    }
}

fn write_tensor<W: Write>(w: &mut W, name: &str, t: &Tensor<f32>) -> Result<(), ModelError> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_tensor<R: Read>(r: &mut R) -> Result<(String, Tensor<f32>), ModelError> {
    let name_len = read_u32(r)? as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
    let ndim = read_u32(r)? as usize;
    let shape = (0..ndim)
        .map(|_| read_u64(r).map(|d| d as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let numel: usize = shape.iter().product();
    let mut raw = vec![0u8; numel * 4];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let t = Tensor::new(&shape, data).map_err(|e| bad(format!("{name}: {e}")))?;
    Ok((name, t))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, ModelError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
