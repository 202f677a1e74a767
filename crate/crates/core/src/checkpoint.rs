//! SVQC1 named-array container.
//!
//! ```text
//! "SVQC1" | u32 count | count x entry
//! entry = u16 name_len | name (UTF-8) | u8 dtype | u8 rank | rank x u32 dim | payload
//! ```
//!
//! dtype 0 is little-endian f32, 1 is little-endian i32. Entries are written
//! sorted by name so equal contents always give identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::data::{read_file, write_file};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"SVQC1";

pub const STAGE_KEY: &str = "meta.stage";
pub const STEP_KEY: &str = "meta.step";
pub const CONFIG_KEY: &str = "meta.config";

#[derive(Debug, Clone, PartialEq)]
pub enum Array {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    I32 { shape: Vec<usize>, data: Vec<i32> },
}

impl Array {
    pub fn shape(&self) -> &[usize] {
        match self {
            Array::F32 { shape, .. } | Array::I32 { shape, .. } => shape,
        }
    }

    fn dtype(&self) -> u8 {
        match self {
            Array::F32 { .. } => 0,
            Array::I32 { .. } => 1,
        }
    }
}

/// Name → array map with the canonical byte encoding.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    entries: BTreeMap<String, Array>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn insert(&mut self, name: impl Into<String>, array: Array) -> Result<()> {
        let name = name.into();
        let n: usize = array.shape().iter().product();
        let len = match &array {
            Array::F32 { data, .. } => data.len(),
            Array::I32 { data, .. } => data.len(),
        };
        if n != len || array.shape().len() > u8::MAX as usize || name.len() > u16::MAX as usize {
            return Err(Error::config(format!("array `{name}` is inconsistent with its shape")));
        }
        if array.shape().iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::config(format!("array `{name}` has a dimension beyond u32")));
        }
        self.entries.insert(name, array);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.entries.get(name)
    }

    pub fn put_tensor(&mut self, name: impl Into<String>, t: &Tensor<f32>) -> Result<()> {
        self.insert(
            name,
            Array::F32 {
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            },
        )
    }

    pub fn put_i32(&mut self, name: impl Into<String>, data: Vec<i32>) -> Result<()> {
        self.insert(
            name,
            Array::I32 {
                shape: vec![data.len()],
                data,
            },
        )
    }

    pub fn put_str(&mut self, name: impl Into<String>, s: &str) -> Result<()> {
        self.put_i32(name, s.bytes().map(i32::from).collect())
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor<f32>> {
        match self.entries.get(name) {
            Some(Array::F32 { shape, data }) => Tensor::from_vec(shape, data.clone()),
            Some(_) => Err(Error::config(format!("entry `{name}` is not f32"))),
            None => Err(Error::config(format!("checkpoint has no entry `{name}`"))),
        }
    }

    pub fn ints(&self, name: &str) -> Result<&[i32]> {
        match self.entries.get(name) {
            Some(Array::I32 { data, .. }) => Ok(data),
            Some(_) => Err(Error::config(format!("entry `{name}` is not i32"))),
            None => Err(Error::config(format!("checkpoint has no entry `{name}`"))),
        }
    }

    pub fn string(&self, name: &str) -> Result<String> {
        let bytes = self
            .ints(name)?
            .iter()
            .map(|&b| u8::try_from(b).map_err(|_| Error::config(format!("entry `{name}` is not a byte string"))))
            .collect::<Result<Vec<u8>>>()?;
        String::from_utf8(bytes).map_err(|_| Error::config(format!("entry `{name}` is not UTF-8")))
    }

    /// Every f32 entry under `prefix`, prefix stripped.
    pub fn params(&self, prefix: &str) -> Result<ParamStore<f32>> {
        let mut store = ParamStore::new();
        for (name, a) in &self.entries {
            if let (Some(rest), Array::F32 { shape, data }) = (name.strip_prefix(prefix), a) {
                store.insert(rest, Tensor::from_vec(shape, data.clone())?);
            }
        }
        Ok(store)
    }

    pub fn put_params(&mut self, prefix: &str, params: &ParamStore<f32>) -> Result<()> {
        for (name, t) in params.iter() {
            self.put_tensor(format!("{prefix}{name}"), t)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, a) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(a.dtype());
            out.push(a.shape().len() as u8);
            for &d in a.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match a {
                Array::F32 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Array::I32 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::parse(0, "missing SVQC1 magic"));
        }
        let count = r.u32()? as usize;
        let mut c = Container::new();
        let mut previous: Option<String> = None;
        for _ in 0..count {
            let at = r.pos;
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::parse(at + 2, "entry name is not UTF-8"))?
                .to_string();
            if previous.as_ref().is_some_and(|p| *p >= name) {
                return Err(Error::parse(at, format!("entry `{name}` is out of order or duplicated")));
            }
            let dtype_at = r.pos;
            let dtype = r.u8()?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::parse(dtype_at, "shape overflows"))?;
            let payload = r.take(n.checked_mul(4).ok_or_else(|| Error::parse(dtype_at, "shape overflows"))?)?;
            let words = payload.chunks_exact(4).map(|b| [b[0], b[1], b[2], b[3]]);
            let array = match dtype {
                0 => Array::F32 {
                    shape,
                    data: words.map(f32::from_le_bytes).collect(),
                },
                1 => Array::I32 {
                    shape,
                    data: words.map(i32::from_le_bytes).collect(),
                },
                d => return Err(Error::parse(dtype_at, format!("unknown dtype code {d}"))),
            };
            c.entries.insert(name.clone(), array);
            previous = Some(name);
        }
        if r.pos != bytes.len() {
            return Err(Error::parse(r.pos, "trailing bytes after last entry"));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    /// SHA-256 (hex) over the canonical encoding of the entries under `prefix`.
    pub fn digest(&self, prefix: &str) -> String {
        let mut sub = Container::new();
        for (k, v) in &self.entries {
            if k.starts_with(prefix) {
                sub.entries.insert(k.clone(), v.clone());
            }
        }
        hex(&Sha256::digest(sub.to_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::parse(self.pos, format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// What a checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Coupled autoencoder.
    Coupled,
    /// Image half of the decoupled baseline.
    BaselineImage,
    /// Semantic half of the decoupled baseline.
    BaselineSemantic,
    /// Transformer.
    Transformer,
}

impl Stage {
    pub fn tag(self) -> &'static str {
        match self {
            Stage::Coupled => "stage1-coupled",
            Stage::BaselineImage => "stage1-baseline-image",
            Stage::BaselineSemantic => "stage1-baseline-semantic",
            Stage::Transformer => "stage2",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        [Stage::Coupled, Stage::BaselineImage, Stage::BaselineSemantic, Stage::Transformer]
            .into_iter()
            .find(|s| s.tag() == tag)
            .ok_or_else(|| Error::config(format!("unknown stage tag `{tag}`")))
    }
}

/// A container together with its embedded config, stage tag and step count.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub stage: Stage,
    pub step: usize,
    pub arrays: Container,
}

impl Checkpoint {
    pub fn new(config: RunConfig, stage: Stage, step: usize) -> Self {
        Checkpoint {
            config,
            stage,
            step,
            arrays: Container::new(),
        }
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = self.arrays.clone();
        c.put_str(CONFIG_KEY, &self.config.serialize()?)?;
        c.put_str(STAGE_KEY, self.stage.tag())?;
        let step = i32::try_from(self.step).map_err(|_| Error::config("step count exceeds i32"))?;
        c.put_i32(STEP_KEY, vec![step])?;
        Ok(c)
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        let config = RunConfig::parse(&c.string(CONFIG_KEY)?)?;
        let stage = Stage::from_tag(&c.string(STAGE_KEY)?)?;
        let step = match c.ints(STEP_KEY)? {
            [s] if *s >= 0 => *s as usize,
            _ => return Err(Error::config("malformed step entry")),
        };
        for k in [CONFIG_KEY, STAGE_KEY, STEP_KEY] {
            c.entries.remove(k);
        }
        Ok(Checkpoint {
            config,
            stage,
            step,
            arrays: c,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.to_container()?.to_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(Container::from_bytes(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    pub fn expect_stage(&self, stage: Stage) -> Result<()> {
        if self.stage != stage {
            return Err(Error::config(format!(
                "expected a {} checkpoint, found {}",
                stage.tag(),
                self.stage.tag()
            )));
        }
        Ok(())
    }

    /// Digest of the trainable arrays (metadata excluded).
    pub fn param_digest(&self) -> String {
        self.arrays.digest("")
    }
}
