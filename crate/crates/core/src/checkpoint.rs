//! "LMC1" tensor container: magic, version, JSON manifest, raw f32 payloads.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::composer::{Composer, ComposerConfig};
use crate::error::{Error, Result};
use crate::lm::{Backbone, TransformerConfig};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"LMC1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub byte_len: usize,
}

/// Serializes tensors in the given order. Values are stored as f32.
pub fn encode<S: Scalar>(tensors: &[(String, &Tensor<S>)]) -> Result<Vec<u8>> {
    let mut manifest = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, t) in tensors {
        let offset = payload.len();
        for v in t.data() {
            payload.extend_from_slice(&(v.to_f64().unwrap() as f32).to_le_bytes());
        }
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            byte_len: payload.len() - offset,
        });
    }
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))
}

/// Parses a container, returning tensors in manifest order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("missing LMC1 magic".into()));
    }
    let version = read_u32(bytes, 4)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mlen = read_u32(bytes, 8)? as usize;
    let json = bytes
        .get(12..12 + mlen)
        .ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(json)
        .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    let payload = &bytes[12 + mlen..];
    let mut out = Vec::with_capacity(manifest.len());
    for e in manifest {
        if e.dtype != "f32" {
            return Err(Error::Checkpoint(format!("tensor {} has dtype {}", e.name, e.dtype)));
        }
        let numel: usize = e.shape.iter().product();
        if e.byte_len != numel * 4 {
            return Err(Error::Checkpoint(format!(
                "tensor {} declares {} bytes for shape {:?}",
                e.name, e.byte_len, e.shape
            )));
        }
        let raw = payload
            .get(e.offset..e.offset + e.byte_len)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} lies outside the payload", e.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(e.shape, data).map_err(|err| Error::Checkpoint(format!("tensor {}: {err}", e.name)))?;
        out.push((e.name, t));
    }
    Ok(out)
}

/// Writes via a temporary sibling file so a failed write leaves no partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save<S: Scalar>(path: &Path, tensors: &[(String, &Tensor<S>)]) -> Result<()> {
    write_atomic(path, &encode(tensors)?)
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Path of the JSON config written next to a model checkpoint.
pub fn config_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

fn write_config<T: Serialize>(path: &Path, config: &T) -> Result<()> {
    write_atomic(&config_path(path), serde_json::to_string_pretty(config)?.as_bytes())
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let p = config_path(path);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn refs<'a, S: Scalar>(named: Vec<(String, &'a std::sync::Arc<Tensor<S>>)>) -> Vec<(String, &'a Tensor<S>)> {
    named.into_iter().map(|(n, t)| (n, t.as_ref())).collect()
}

/// Saves backbone tensors plus its config sidecar.
pub fn save_backbone(path: &Path, model: &Backbone<f32>) -> Result<()> {
    save(path, &refs(model.named_params()))?;
    write_config(path, &model.config)
}

pub fn load_backbone(path: &Path) -> Result<Backbone<f32>> {
    let config: TransformerConfig = read_config(path)?;
    Backbone::from_named(config, load(path)?.into_iter().collect())
}

/// Saves composer tensors plus its config sidecar.
pub fn save_composer(path: &Path, composer: &Composer<f32>) -> Result<()> {
    save(path, &refs(composer.trainable_parameters()))?;
    write_config(path, &composer.config)
}

/// Loads a composer bound to `backbone`'s token table.
pub fn load_composer(path: &Path, backbone: &Backbone<f32>) -> Result<Composer<f32>> {
    let config: ComposerConfig = read_config(path)?;
    let mut c = Composer::init(config, backbone, 0)?;
    c.load_named(load(path)?.into_iter().collect())?;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let a = Tensor::<f32>::from_rows(&[vec![1.5, -0.0], vec![f32::MIN_POSITIVE, 3.25e-7]]).unwrap();
        let b = Tensor::<f32>::from_vec(vec![7.0; 5]);
        let bytes = encode(&[("a".into(), &a), ("b".into(), &b)]).unwrap();
        assert_eq!(&bytes[..4], b"LMC1");
        let back = decode(&bytes).unwrap();
        assert_eq!(back[0].0, "a");
        assert!(back[0].1.bit_eq(&a));
        assert!(back[1].1.bit_eq(&b));
        assert_eq!(encode(&[("a".into(), &back[0].1), ("b".into(), &back[1].1)]).unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let a = Tensor::<f32>::from_vec(vec![1.0, 2.0]);
        let mut bytes = encode(&[("a".into(), &a)]).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(decode(&bytes).is_err());
    }
}
