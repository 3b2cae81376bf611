//! Versioned binary checkpoints: config echo, counters, named parameter
//! tensors and optional optimizer moments. All integers little-endian.
//!
//! Layout: magic, version `u32`, config TOML, `env_steps u64`, `cycles u64`,
//! parameter count `u32`, then per tensor `name, dtype u8, rank u32, dims u64*, values`,
//! then a `u8` optimizer flag followed by `adam_steps u64` and the first and
//! second moments in parameter order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use m3l_autograd::{DType, ParamStore, Tensor};

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"M3LCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub steps: u64,
    pub first: Vec<Tensor<f32>>,
    pub second: Vec<Tensor<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub env_steps: u64,
    pub cycles: u64,
    pub params: Vec<NamedTensor>,
    pub optimizer: Option<OptimizerState>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = r.read_u32::<LittleEndian>().map_err(|e| bad(e.to_string()))? as usize;
    if len > 1 << 24 {
        return Err(bad(format!("string length {len} is implausible")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|e| bad(e.to_string()))?;
    String::from_utf8(buf).map_err(|e| bad(e.to_string()))
}

fn write_tensor<W: Write>(w: &mut W, t: &Tensor<f32>) -> std::io::Result<()> {
    w.write_u8(DType::F32.code())?;
    w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
    for &d in t.shape() {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    for &v in t.data() {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor<f32>> {
    let io = |e: std::io::Error| bad(e.to_string());
    let code = r.read_u8().map_err(io)?;
    let dtype = DType::from_code(code).ok_or_else(|| bad(format!("unknown dtype code {code}")))?;
    let rank = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    if rank > 8 {
        return Err(bad(format!("tensor rank {rank} is implausible")));
    }
    let shape = (0..rank).map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize)).collect::<std::io::Result<Vec<_>>>().map_err(io)?;
    let n: usize = shape.iter().product();
    if n > 1 << 30 {
        return Err(bad(format!("tensor of {n} values is implausible")));
    }
    let data = match dtype {
        DType::F32 => (0..n).map(|_| r.read_f32::<LittleEndian>()).collect::<std::io::Result<Vec<_>>>().map_err(io)?,
        DType::F64 => (0..n).map(|_| r.read_f64::<LittleEndian>().map(|v| v as f32)).collect::<std::io::Result<Vec<_>>>().map_err(io)?,
    };
    Ok(Tensor::new(&shape, data)?)
}

impl Checkpoint {
    /// Snapshot of `store` (and optionally the optimizer moments).
    pub fn capture(
        config: &RunConfig,
        env_steps: u64,
        cycles: u64,
        store: &ParamStore<f32>,
        optimizer: Option<&m3l_autograd::optim::Adam<f32>>,
    ) -> Self {
        let params = store.iter().map(|(_, name, v)| NamedTensor { name: name.to_string(), value: v.clone() }).collect();
        let optimizer = optimizer.map(|opt| {
            let (steps, first, second) = opt.state();
            OptimizerState { steps, first: first.to_vec(), second: second.to_vec() }
        });
        Self { config: config.clone(), env_steps, cycles, params, optimizer }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let io = |e: std::io::Error| bad(e.to_string());
        w.write_all(MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(VERSION).map_err(io)?;
        write_str(w, &self.config.to_toml()).map_err(io)?;
        w.write_u64::<LittleEndian>(self.env_steps).map_err(io)?;
        w.write_u64::<LittleEndian>(self.cycles).map_err(io)?;
        w.write_u32::<LittleEndian>(self.params.len() as u32).map_err(io)?;
        for p in &self.params {
            write_str(w, &p.name).map_err(io)?;
            write_tensor(w, &p.value).map_err(io)?;
        }
        match &self.optimizer {
            None => w.write_u8(0).map_err(io)?,
            Some(opt) => {
                w.write_u8(1).map_err(io)?;
                w.write_u64::<LittleEndian>(opt.steps).map_err(io)?;
                for t in opt.first.iter().chain(&opt.second) {
                    write_tensor(w, t).map_err(io)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let io = |e: std::io::Error| bad(e.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != VERSION {
            return Err(bad(format!("format version {version} is not supported (expected {VERSION})")));
        }
        let config = RunConfig::from_toml(&read_str(r)?)?;
        let env_steps = r.read_u64::<LittleEndian>().map_err(io)?;
        let cycles = r.read_u64::<LittleEndian>().map_err(io)?;
        let n = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name = read_str(r)?;
            params.push(NamedTensor { name, value: read_tensor(r)? });
        }
        let optimizer = match r.read_u8().map_err(io)? {
            0 => None,
            1 => {
                let steps = r.read_u64::<LittleEndian>().map_err(io)?;
                let first = (0..n).map(|_| read_tensor(r)).collect::<Result<Vec<_>>>()?;
                let second = (0..n).map(|_| read_tensor(r)).collect::<Result<Vec<_>>>()?;
                Some(OptimizerState { steps, first, second })
            }
            other => return Err(bad(format!("unknown optimizer flag {other}"))),
        };
        Ok(Self { config, env_steps, cycles, params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write then rename so a crash never leaves a truncated checkpoint behind
        let tmp = path.with_extension("tmp");
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(&tmp, e))?;
        drop(w);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file)).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Copies the saved tensors into `store`; names and shapes must match exactly.
    pub fn load_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(bad(format!("checkpoint holds {} tensors, model expects {}", self.params.len(), store.len())));
        }
        for p in &self.params {
            let id = store.id(&p.name).map_err(|_| bad(format!("model has no parameter `{}`", p.name)))?;
            if store.get(id).shape() != p.value.shape() {
                return Err(bad(format!(
                    "parameter `{}` has shape {:?} in the checkpoint but {:?} in the model",
                    p.name,
                    p.value.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = p.value.clone();
        }
        Ok(())
    }
}
