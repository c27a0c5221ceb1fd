//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MILC" | version u32 | config_len u32 | config (UTF-8 key=value lines)
//! param_count u32 | param tensors...
//! step u64 | lr f32 | beta1 f32 | beta2 f32 | epsilon f32
//! moment_count u32 | moment tensors...
//! tensor := name_len u32 | name | rank u32 | dims u64 x rank | f32 x numel
//! ```
//!
//! Moment tensors are named `adam.m.<param>` and `adam.v.<param>`, written
//! in parameter order, first moments before second moments.

use std::path::Path;

use super::model::{Model, ModelConfig};
use super::optim::AdamState;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MILC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Model, optimizer state, and free-form `meta.*` metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: AdamState,
    /// Sorted by key on encode.
    pub meta: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn new(model: Model, optimizer: AdamState) -> Self {
        Self {
            model,
            optimizer,
            meta: Vec::new(),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut text = String::new();
        for (k, v) in self.model.config().to_kv() {
            text.push_str(&format!("{k}={v}\n"));
        }
        let mut meta = self.meta.clone();
        meta.sort();
        for (k, v) in &meta {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Usage(format!("metadata entry {k:?} cannot be encoded")));
            }
            text.push_str(&format!("meta.{k}={v}\n"));
        }

        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, len_u32(text.len())?);
        out.extend_from_slice(text.as_bytes());

        let names = self.model.param_names();
        put_u32(&mut out, len_u32(names.len())?);
        for (name, t) in names.iter().zip(self.model.params()) {
            put_tensor(&mut out, name, t.shape(), t.data())?;
        }

        let opt = &self.optimizer;
        if opt.first_moments().len() != names.len() {
            return Err(Error::Usage("optimizer state does not match model".into()));
        }
        out.extend_from_slice(&opt.step_count().to_le_bytes());
        for v in [opt.lr, opt.beta1, opt.beta2, opt.epsilon] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        put_u32(&mut out, len_u32(2 * names.len())?);
        for (prefix, moments) in [("adam.m.", opt.first_moments()), ("adam.v.", opt.second_moments())] {
            for ((name, p), m) in names.iter().zip(self.model.params()).zip(moments) {
                put_tensor(&mut out, &format!("{prefix}{name}"), p.shape(), m)?;
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(format_err("bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(format_err(&format!("unsupported version {version}")));
        }
        let text_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(text_len)?)
            .map_err(|_| format_err("config block is not UTF-8"))?;
        let mut arch = Vec::new();
        let mut meta = Vec::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format_err(&format!("config line {line:?} lacks '='")))?;
            match k.strip_prefix("meta.") {
                Some(mk) => meta.push((mk.to_string(), v.to_string())),
                None => arch.push((k, v)),
            }
        }
        let config = ModelConfig::from_kv(arch)?;

        let count = r.u32()? as usize;
        let mut named = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let (name, shape, data) = r.tensor()?;
            named.push((name, Tensor::new(shape, data)?));
        }
        let model = Model::from_parts(config, named)?;

        let step = r.u64()?;
        let lr = r.f32()?;
        let beta1 = r.f32()?;
        let beta2 = r.f32()?;
        let epsilon = r.f32()?;
        let moment_count = r.u32()? as usize;
        let n = model.params().len();
        if moment_count != 2 * n {
            return Err(format_err(&format!(
                "expected {} moment tensors, found {moment_count}",
                2 * n
            )));
        }
        let mut buffers = Vec::with_capacity(moment_count);
        for i in 0..moment_count {
            let (name, shape, data) = r.tensor()?;
            let pname = &model.param_names()[i % n];
            let prefix = if i < n { "adam.m." } else { "adam.v." };
            if name != format!("{prefix}{pname}") || shape != model.params()[i % n].shape() {
                return Err(format_err(&format!("unexpected moment tensor {name}")));
            }
            buffers.push(data);
        }
        if r.pos != bytes.len() {
            return Err(format_err("trailing bytes"));
        }
        let second = buffers.split_off(n);
        let optimizer = AdamState::from_parts(
            lr,
            beta1,
            beta2,
            epsilon,
            step,
            buffers.into_iter().zip(second).collect(),
        )?;
        Ok(Self {
            model,
            optimizer,
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn format_err(message: &str) -> Error {
    Error::Format {
        kind: "checkpoint",
        message: message.to_string(),
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Usage(format!("length {n} exceeds u32")))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
    put_u32(out, len_u32(name.len())?);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, len_u32(shape.len())?);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format_err("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f32>)> {
        let name_len = self.u32()? as usize;
        let name = String::from_utf8(self.take(name_len)?.to_vec())
            .map_err(|_| format_err("tensor name is not UTF-8"))?;
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = usize::try_from(self.u64()?).map_err(|_| format_err("dimension overflow"))?;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| format_err("tensor size overflow"))?;
            shape.push(d);
        }
        let raw = self.take(numel.checked_mul(4).ok_or_else(|| format_err("tensor size overflow"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, shape, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let model = Model::new(ModelConfig::small_cnn(16), 5).unwrap();
        let opt = AdamState::new(model.params(), 1e-4);
        let mut ck = Checkpoint::new(model, opt);
        ck.set_meta("best_epoch", 3);
        ck.set_meta("val_balanced_error", 0.125);
        ck
    }

    #[test]
    fn encode_decode_encode_is_byte_identical() {
        let ck = sample();
        let a = ck.encode().unwrap();
        let back = Checkpoint::decode(&a).unwrap();
        assert_eq!(back.model, ck.model);
        assert_eq!(back.meta("best_epoch"), Some("3"));
        assert_eq!(back.encode().unwrap(), a);
    }

    #[test]
    fn starts_with_magic_and_version() {
        let a = sample().encode().unwrap();
        assert_eq!(&a[..4], b"MILC");
        assert_eq!(u32::from_le_bytes(a[4..8].try_into().unwrap()), 1);
    }

    #[test]
    fn truncated_and_corrupt_inputs_fail() {
        let a = sample().encode().unwrap();
        assert!(Checkpoint::decode(&a[..a.len() - 1]).is_err());
        let mut bad = a.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
        let mut long = a;
        long.push(0);
        assert!(Checkpoint::decode(&long).is_err());
    }
}
