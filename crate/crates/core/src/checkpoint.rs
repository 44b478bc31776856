//! Binary checkpoint format shared by every model kind.
//!
//! Layout (little-endian): 8-byte magic, `u32` version, kind tag, config JSON,
//! tensor table, metadata JSON. Strings are `u32` length + UTF-8; each tensor
//! is its name, `u32` rank, `u64` dims and `f32` values.

use std::io::{Read, Write};
use std::path::Path;

use cyclevc_autograd::{Adam, AdamConfig, ParamStore, Tensor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

pub const MAGIC: &[u8; 8] = b"CYCLEVC\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Generator,
    Discriminator,
    Sv,
    Asr,
    Pitch,
}

impl ModelKind {
    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::Generator => "generator",
            ModelKind::Discriminator => "discriminator",
            ModelKind::Sv => "sv",
            ModelKind::Asr => "asr",
            ModelKind::Pitch => "pitch",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        [ModelKind::Generator, ModelKind::Discriminator, ModelKind::Sv, ModelKind::Asr, ModelKind::Pitch]
            .into_iter()
            .find(|k| k.tag() == tag)
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
    pub metadata: serde_json::Value,
}

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn from_store(kind: ModelKind, config: &impl Serialize, store: &ParamStore) -> Result<Self> {
        Ok(Checkpoint {
            kind,
            config: serde_json::to_value(config)?,
            tensors: store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect(),
            metadata: serde_json::Value::Object(Default::default()),
        })
    }

    /// Appends optimizer moments as `adam.m.<param>` / `adam.v.<param>` and
    /// the step count as metadata.
    pub fn with_optimizer(mut self, store: &ParamStore, adam: &Adam) -> Self {
        let (m, v) = adam.moments();
        for ((_, name, _), (mt, vt)) in store.iter().zip(m.iter().zip(v)) {
            self.tensors.push((format!("{ADAM_M}{name}"), mt.clone()));
            self.tensors.push((format!("{ADAM_V}{name}"), vt.clone()));
        }
        self.set_meta("adam_steps", adam.steps());
        self
    }

    pub fn set_meta(&mut self, key: &str, value: impl Serialize) {
        if let serde_json::Value::Object(map) = &mut self.metadata {
            map.insert(key.to_string(), serde_json::to_value(value).expect("metadata serializes"));
        }
    }

    pub fn meta<T: DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self.metadata.get(key).ok_or_else(|| ck(format!("metadata has no `{key}`")))?;
        serde_json::from_value(v.clone()).map_err(|e| ck(format!("metadata `{key}`: {e}")))
    }

    pub fn config<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone()).map_err(|e| ck(format!("{} config: {e}", self.kind)))
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(ck(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    /// Copies every parameter of `store` from the checkpoint. Missing names,
    /// shape mismatches and unknown non-optimizer tensors are errors.
    pub fn restore_store(&self, store: &mut ParamStore) -> Result<()> {
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let t = self.tensor(&name).ok_or_else(|| ck(format!("missing tensor `{name}`")))?;
            if t.shape() != store.get(id).shape() {
                return Err(ck(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            store.set(id, t.clone());
        }
        for (name, _) in &self.tensors {
            if !name.starts_with(ADAM_M) && !name.starts_with(ADAM_V) && store.find(name).is_none() {
                return Err(ck(format!("unexpected tensor `{name}`")));
            }
        }
        Ok(())
    }

    pub fn restore_optimizer(&self, store: &ParamStore, config: AdamConfig) -> Result<Adam> {
        let mut m = Vec::with_capacity(store.len());
        let mut v = Vec::with_capacity(store.len());
        for (_, name, t) in store.iter() {
            for (prefix, out) in [(ADAM_M, &mut m), (ADAM_V, &mut v)] {
                let key = format!("{prefix}{name}");
                let x = self.tensor(&key).ok_or_else(|| ck(format!("missing optimizer tensor `{key}`")))?;
                if x.shape() != t.shape() {
                    return Err(ck(format!("optimizer tensor `{key}` has shape {:?}", x.shape())));
                }
                out.push(x.clone());
            }
        }
        Ok(Adam::restore(config, m, v, self.meta("adam_steps")?))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, self.kind.tag());
        put_str(&mut out, &self.config.to_string());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        put_str(&mut out, &self.metadata.to_string());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(ck("not a checkpoint file (bad magic)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(ck(format!("unsupported format version {version}")));
        }
        let tag = r.string()?;
        let kind = ModelKind::from_tag(&tag).ok_or_else(|| ck(format!("unknown model kind `{tag}`")))?;
        let config = serde_json::from_str(&r.string()?)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| ck("tensor size overflow"))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
            tensors.push((name, Tensor::new(&shape, data)));
        }
        let metadata = serde_json::from_str(&r.string()?)?;
        if r.pos != bytes.len() {
            return Err(ck(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { kind, config, tensors, metadata })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).at(path)?;
        f.write_all(&self.to_bytes()).at(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path).at(path)?.read_to_end(&mut bytes).at(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| ck("truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| ck("invalid UTF-8 string"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{Generator, MelNorm, NetConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gen(seed: u64) -> Generator {
        Generator::new(&NetConfig::miniature(), &MelNorm::identity(6), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn generator_round_trip() {
        let a = gen(1);
        let mut ckpt = Checkpoint::from_store(ModelKind::Generator, a.config(), a.store()).unwrap();
        ckpt.set_meta("step", 7u64);
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        assert_eq!(back, ckpt);
        let mut b = gen(2);
        assert_ne!(a.store(), b.store());
        back.restore_store(b.store_mut()).unwrap();
        assert_eq!(a.store(), b.store());
        assert_eq!(back.meta::<u64>("step").unwrap(), 7);
        assert_eq!(back.config::<NetConfig>().unwrap(), *a.config());
    }

    #[test]
    fn optimizer_state_round_trip() {
        let g = gen(3);
        let mut store = g.store().clone();
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let grads: Vec<Tensor> = store.iter().map(|(_, _, t)| t.map(|x| x * 0.5 + 0.1)).collect();
        adam.step(&mut store, &grads);
        let ckpt = Checkpoint::from_store(ModelKind::Generator, g.config(), &store).unwrap().with_optimizer(&store, &adam);
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        assert_eq!(back.restore_optimizer(&store, AdamConfig::default()).unwrap(), adam);
    }

    #[test]
    fn shape_and_name_mismatches_are_rejected() {
        let g = gen(4);
        let ckpt = Checkpoint::from_store(ModelKind::Generator, g.config(), g.store()).unwrap();
        let other = Generator::new(
            &NetConfig { decoder_hidden: 7, ..NetConfig::miniature() },
            &MelNorm::identity(6),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let mut s = other.store().clone();
        let e = ckpt.restore_store(&mut s).unwrap_err();
        assert!(e.to_string().contains("shape"), "{e}");
        let mut missing = ckpt.clone();
        missing.tensors.pop();
        let mut s = g.store().clone();
        assert!(missing.restore_store(&mut s).unwrap_err().to_string().contains("missing"));
    }

    #[test]
    fn corrupt_bytes_are_errors() {
        let g = gen(5);
        let bytes = Checkpoint::from_store(ModelKind::Sv, g.config(), g.store()).unwrap().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let c = Checkpoint::from_bytes(&bytes).unwrap();
        assert!(c.expect_kind(ModelKind::Sv).is_ok());
        assert!(c.expect_kind(ModelKind::Asr).is_err());
    }
}
