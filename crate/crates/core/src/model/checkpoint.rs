//! Binary checkpoint: `"LVPM"`, version, JSON model config, the tokenizer
//! (vocabulary and merge files as text), named f32 parameters, and an
//! optional optimizer section for resuming training.

use std::path::Path;

use super::{LvpM3Model, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::Tokenizer;

const MAGIC: &[u8; 4] = b"LVPM";
const VERSION: u32 = 1;

/// Optimizer moments plus free-form loop state.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSection {
    pub meta: serde_json::Value,
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tokenizer: Option<Tokenizer>,
    pub params: ParamStore<f32>,
    pub optimizer: Option<OptimizerSection>,
}

impl Checkpoint {
    pub fn from_model(model: &LvpM3Model<f32>, tokenizer: Option<&Tokenizer>) -> Self {
        Self {
            config: model.config().clone(),
            tokenizer: tokenizer.cloned(),
            params: model.params().clone(),
            optimizer: None,
        }
    }

    pub fn model(&self) -> Result<LvpM3Model<f32>> {
        LvpM3Model::from_params(self.config.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_str(&mut out, &serde_json::to_string(&self.config)?);
        match &self.tokenizer {
            Some(t) => {
                out.push(1);
                put_str(&mut out, &t.vocab().to_file_string());
                put_str(&mut out, &t.merges_to_string());
            }
            None => out.push(0),
        }
        put_store(&mut out, &self.params)?;
        match &self.optimizer {
            Some(opt) => {
                out.push(1);
                put_str(&mut out, &serde_json::to_string(&opt.meta)?);
                put_store(&mut out, &opt.m)?;
                put_store(&mut out, &opt.v)?;
            }
            None => out.push(0),
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format(0, "bad magic, expected LVPM"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let config: ModelConfig = serde_json::from_str(&r.string()?)?;
        let tokenizer = if r.flag()? {
            let vocab = r.string()?;
            let merges = r.string()?;
            Some(Tokenizer::from_strings(&vocab, &merges)?)
        } else {
            None
        };
        let params = r.store()?;
        let optimizer = if r.flag()? {
            let meta = serde_json::from_str(&r.string()?)?;
            let m = r.store()?;
            let v = r.store()?;
            Some(OptimizerSection { meta, m, v })
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos, "trailing bytes"));
        }
        Ok(Self {
            config,
            tokenizer,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_store(out: &mut Vec<u8>, store: &ParamStore<f32>) -> Result<()> {
    put_u32(out, store.len() as u32);
    for (name, t) in store {
        if name.len() > u16::MAX as usize || t.rank() > u8::MAX as usize {
            return Err(Error::Config(format!("parameter `{name}` cannot be serialized")));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            put_u32(out, d as u32);
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.pos, format!("truncated: need {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn flag(&mut self) -> Result<bool> {
        let at = self.pos;
        match self.take(1)?[0] {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::format(at, format!("invalid flag byte {b}"))),
        }
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(at, "invalid UTF-8"))
    }

    fn store(&mut self) -> Result<ParamStore<f32>> {
        let count = self.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let at = self.pos;
            let n = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(at, "invalid name"))?;
            let rank = self.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u32()? as usize);
            }
            let len: usize = shape.iter().product();
            let raw = self.take(len.checked_mul(4).ok_or_else(|| Error::format(at, "size overflow"))?)?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            if store.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(Error::format(at, format!("duplicate parameter `{name}`")));
            }
        }
        Ok(store)
    }
}
