//! Binary checkpoints.
//!
//! Layout: `"L2IR"`, `u32` version, `u32` length + UTF-8 `key=value` config
//! block, then one record per parameter until end of file: `u32` name length,
//! name, `u32` rank, `rank × u32` dims, little-endian `f32` data. All integers
//! are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{LoraAdapter, LoraConfig, Model, ModelConfig, Weights};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"L2IR";
pub const VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, x: u32) {
    buf.extend_from_slice(&x.to_le_bytes());
}

fn put_record(buf: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    put_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, t.shape().len() as u32);
    for &d in t.shape() {
        put_u32(buf, d as u32);
    }
    for x in t.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

/// Serialize a model; parameters are stored as `f32`.
pub fn to_bytes<T: Real>(model: &Model<T>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    let mut text = model.config.to_kv();
    if let Some(l) = &model.lora {
        text.push_str(&l.config.to_kv());
    }
    put_u32(&mut buf, text.len() as u32);
    buf.extend_from_slice(text.as_bytes());
    for (name, t) in model.weights.named() {
        put_record(&mut buf, &name, &t.cast());
    }
    if let Some(l) = &model.lora {
        for (name, t) in l.named() {
            put_record(&mut buf, &name, &t.cast());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!("truncated checkpoint while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32("config length")? as usize;
    let text = std::str::from_utf8(r.take(len, "config")?)
        .map_err(|_| Error::Format("config block is not UTF-8".into()))?;
    let mut config = ModelConfig::default();
    let mut lora_cfg = LoraConfig::default();
    let mut has_lora = false;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad config line {line:?}")))?;
        if config.set_kv(k, v)? {
            continue;
        }
        if lora_cfg.set_kv(k, v)? {
            has_lora = true;
            continue;
        }
        return Err(Error::Format(format!("unknown config key {k:?}")));
    }
    config.validate().map_err(|e| Error::Format(e.to_string()))?;

    let mut records = std::collections::HashMap::new();
    while !r.done() {
        let n = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(n, "name")?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let raw = r.take(numel * 4, &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if records.insert(name.clone(), Tensor::new(dims, data)?).is_some() {
            return Err(Error::Format(format!("duplicate parameter {name}")));
        }
    }

    let mut fill = |name: &str, slot: &mut Tensor<f32>| -> Result<()> {
        let t = records
            .remove(name)
            .ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
        if t.shape() != slot.shape() {
            return Err(Error::Format(format!(
                "parameter {name} has shape {:?}, config implies {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
        Ok(())
    };
    let mut weights = Weights::<Tensor<f32>>::zeros(&config);
    for (name, slot) in weights.named_mut() {
        fill(&name, slot)?;
    }
    let lora = if has_lora {
        let mut adapter = LoraAdapter::zeros(lora_cfg, &config)?;
        for (name, slot) in adapter.named_mut() {
            fill(&name, slot)?;
        }
        Some(adapter)
    } else {
        None
    };
    if let Some(name) = records.keys().next() {
        return Err(Error::Format(format!("unexpected parameter {name}")));
    }
    Ok(Model {
        config,
        weights,
        lora,
    })
}

/// Write atomically: a sibling temp file renamed into place.
pub fn save<T: Real>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&to_bytes(model)).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// SHA-256 of the serialized model, hex encoded.
pub fn fingerprint<T: Real>(model: &Model<T>) -> String {
    hex::encode(Sha256::digest(to_bytes(model)))
}

pub fn fingerprint_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 8,
            max_context: 8,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let mut m = Model::<f32>::new(tiny(), 3).unwrap();
        m.attach_lora(LoraConfig { rank: 2, ..Default::default() }, 4).unwrap();
        let bytes = to_bytes(&m);
        assert_eq!(&bytes[..4], b"L2IR");
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn rejects_garbage() {
        assert!(from_bytes(b"XXXX").is_err());
        let m = Model::<f32>::new(tiny(), 3).unwrap();
        let bytes = to_bytes(&m);
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/model.ckpt");
        let m = Model::<f32>::new(tiny(), 9).unwrap();
        save(&m, &p).unwrap();
        assert!(!dir.path().join("sub/model.ckpt.tmp").exists());
        assert_eq!(load(&p).unwrap(), m);
        assert_eq!(fingerprint_file(&p).unwrap(), fingerprint(&m));
    }
}
