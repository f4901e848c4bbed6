//! Versioned binary container for models, discriminators and policies.
//!
//! Layout: magic `PPCK`, `u32` format version, `u32` header length, JSON
//! header, `u32` tensor count, then per tensor a `u32`-length name, `u32`
//! rank, `u64` dims and little-endian `f64` values.

use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::attribute::Discriminator;
use crate::error::{Error, Result};
use crate::lm::{LMConfig, LanguageModel, PrefixState};
use crate::rldaf::{AdaptedModel, LoraAdapter, Policy};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PPCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub kind: String,
    pub config: LMConfig,
    pub seed: u64,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Header,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

impl Container {
    pub fn new(kind: &str, config: LMConfig, seed: u64) -> Self {
        Self {
            header: Header {
                format_version: FORMAT_VERSION,
                kind: kind.into(),
                config,
                seed,
                metadata: BTreeMap::new(),
            },
            tensors: Vec::new(),
        }
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.push((name.into(), t.cast()));
    }

    pub fn get<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.cast())
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.write_all(MAGIC)?;
        out.write_u32::<LittleEndian>(self.header.format_version)?;
        let header = serde_json::to_vec(&self.header)?;
        out.write_u32::<LittleEndian>(header.len() as u32)?;
        out.write_all(&header)?;
        out.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            out.write_u32::<LittleEndian>(name.len() as u32)?;
            out.write_all(name.as_bytes())?;
            out.write_u32::<LittleEndian>(t.shape().len() as u32)?;
            for &d in t.shape() {
                out.write_u64::<LittleEndian>(d as u64)?;
            }
            for &x in t.data() {
                out.write_f64::<LittleEndian>(x)?;
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let header_len = r.read_u32::<LittleEndian>()? as usize;
        let header: Header = serde_json::from_slice(take(&mut r, header_len)?)?;
        if header.format_version != version {
            return Err(Error::Format("header version disagrees with preamble".into()));
        }
        let count = r.read_u32::<LittleEndian>()?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = r.read_u32::<LittleEndian>()? as usize;
            let name = String::from_utf8(take(&mut r, len)?.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
            let rank = r.read_u32::<LittleEndian>()? as usize;
            let shape = (0..rank)
                .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            if n * 8 > bytes.len() {
                return Err(Error::Format(format!("tensor {name} larger than file")));
            }
            let data = (0..n)
                .map(|_| r.read_f64::<LittleEndian>())
                .collect::<std::io::Result<Vec<_>>>()?;
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if (r.position() as usize) != bytes.len() {
            return Err(Error::Format("trailing bytes after last tensor".into()));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::Format(format!(
                "expected a {kind} checkpoint, found {}",
                self.header.kind
            )));
        }
        Ok(())
    }
}

fn take<'b>(r: &mut Cursor<&'b [u8]>, n: usize) -> Result<&'b [u8]> {
    let start = r.position() as usize;
    let buf: &'b [u8] = r.get_ref();
    let end = start
        .checked_add(n)
        .filter(|&e| e <= buf.len())
        .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
    r.set_position(end as u64);
    Ok(&buf[start..end])
}

fn push_model<T: Scalar>(c: &mut Container, lm: &LanguageModel<T>) {
    for (name, t) in lm.named_params() {
        c.push(name, t);
    }
}

fn read_model<T: Scalar>(c: &Container) -> Result<LanguageModel<T>> {
    let names: Vec<String> = LanguageModel::<T>::init(c.header.config, 0)?
        .named_params()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    let tensors = names
        .iter()
        .map(|n| Ok((n.clone(), c.get::<T>(n)?)))
        .collect::<Result<Vec<_>>>()?;
    LanguageModel::from_named(c.header.config, c.header.seed, &tensors)
}

pub fn lm_container<T: Scalar>(lm: &LanguageModel<T>) -> Container {
    let mut c = Container::new("lm", *lm.config(), lm.seed());
    push_model(&mut c, lm);
    c
}

pub fn lm_from_container<T: Scalar>(c: &Container) -> Result<LanguageModel<T>> {
    c.expect_kind("lm")?;
    read_model(c)
}

pub fn discriminator_container<T: Scalar>(disc: &Discriminator<T>, config: LMConfig, seed: u64) -> Container {
    let mut c = Container::new("discriminator", config, seed);
    c.header
        .metadata
        .insert("class_names".into(), serde_json::json!(disc.class_names));
    c.push("head.weight", &disc.weight);
    c.push("head.bias", &disc.bias);
    c
}

pub fn discriminator_from_container<T: Scalar>(c: &Container) -> Result<Discriminator<T>> {
    c.expect_kind("discriminator")?;
    let names: Vec<String> = serde_json::from_value(
        c.header
            .metadata
            .get("class_names")
            .cloned()
            .ok_or_else(|| Error::Format("missing class_names".into()))?,
    )?;
    Discriminator::new(c.get("head.weight")?, c.get("head.bias")?, names)
}

/// A policy checkpoint is self-contained: base weights, adapter factors
/// the prefix bank and the reference prefix.
pub fn policy_container<T: Scalar>(policy: &Policy<T>) -> Container {
    let base = policy.base();
    let mut c = Container::new("policy", *base.config(), base.seed());
    push_model(&mut c, base);
    let adapter = &policy.model.adapter;
    c.header
        .metadata
        .insert("lora_rank".into(), serde_json::json!(adapter.rank()));
    c.header
        .metadata
        .insert("lora_scale".into(), serde_json::json!(adapter.scale.as_f64()));
    c.header
        .metadata
        .insert("targets".into(), serde_json::json!(policy.prefix_bank.len()));
    for (name, t) in adapter.named_tensors() {
        c.push(name, t);
    }
    for (i, p) in policy.prefix_bank.iter().enumerate() {
        for (j, t) in p.tensors().enumerate() {
            c.push(format!("prefix.{i}.{}.{}", j / 2, ["k", "v"][j % 2]), t);
        }
    }
    for (j, t) in policy.reference_prefix.tensors().enumerate() {
        c.push(format!("reference.{}.{}", j / 2, ["k", "v"][j % 2]), t);
    }
    c
}

fn meta_usize(c: &Container, key: &str) -> Result<usize> {
    c.header
        .metadata
        .get(key)
        .and_then(serde_json::Value::as_u64)
        .map(|v| v as usize)
        .ok_or_else(|| Error::Format(format!("missing {key}")))
}

pub fn policy_from_container<T: Scalar>(c: &Container) -> Result<Policy<T>> {
    c.expect_kind("policy")?;
    let base = read_model::<T>(c)?;
    let cfg = *base.config();
    let mut adapter = LoraAdapter::<T>::new(&cfg, meta_usize(c, "lora_rank")?, 0)?;
    adapter.scale = T::lit(
        c.header
            .metadata
            .get("lora_scale")
            .and_then(serde_json::Value::as_f64)
            .ok_or_else(|| Error::Format("missing lora_scale".into()))?,
    );
    let names: Vec<String> = adapter.named_tensors().into_iter().map(|(n, _)| n).collect();
    for (t, name) in adapter.tensors_mut().zip(&names) {
        *t = load_shaped(c, name, t.shape())?;
    }
    let read_prefix = |stem: &str| -> Result<PrefixState<T>> {
        let mut p = PrefixState::<T>::zeros(&cfg);
        for (j, t) in p.tensors_mut().enumerate() {
            let name = format!("{stem}.{}.{}", j / 2, ["k", "v"][j % 2]);
            *t = load_shaped(c, &name, t.shape())?;
        }
        Ok(p)
    };
    let bank = (0..meta_usize(c, "targets")?)
        .map(|i| read_prefix(&format!("prefix.{i}")))
        .collect::<Result<Vec<_>>>()?;
    Ok(Policy {
        model: AdaptedModel { base, adapter },
        prefix_bank: bank,
        reference_prefix: read_prefix("reference")?,
    })
}

fn load_shaped<T: Scalar>(c: &Container, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
    let t = c.get::<T>(name)?;
    if t.shape() != shape {
        return Err(Error::Format(format!(
            "tensor {name} has shape {:?}, expected {shape:?}",
            t.shape()
        )));
    }
    Ok(t)
}
