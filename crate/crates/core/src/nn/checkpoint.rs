//! `cdnet-ckpt-v1` parameter checkpoints.
//!
//! Layout: a 16-byte tag, a little-endian `u64` manifest length, the TOML
//! manifest (network config plus name, shape and byte offset of every
//! tensor), a little-endian `u64` payload length and the payload of
//! little-endian `f32` values.

use super::net::{NetworkConfig, NetworkParams};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_TAG: &[u8; 16] = b"cdnet-ckpt-v1\0\0\0";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: NetworkConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(format!("checkpoint: {}", msg.into()))
}

/// Name and shape of every stored tensor, in payload order.
pub fn tensor_shapes(cfg: &NetworkConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for (i, s) in cfg.layer_shapes().iter().enumerate() {
        let name = NetworkConfig::layer_name(i);
        let c = s.conv.out_channels;
        out.push((format!("{name}.weight"), s.conv.weight_shape().to_vec()));
        if s.has_bias() {
            out.push((format!("{name}.bias"), vec![c]));
        }
        if s.block.has_bn() {
            for t in ["gamma", "beta", "running_mean", "running_var"] {
                out.push((format!("{name}.bn.{t}"), vec![c]));
            }
        }
    }
    out
}

pub fn checkpoint_to_bytes(params: &NetworkParams<f32>, cfg: &NetworkConfig) -> Result<Vec<u8>> {
    cfg.validate()?;
    let named = params.named_tensors();
    let shapes = tensor_shapes(cfg);
    if named.len() != shapes.len()
        || named
            .iter()
            .zip(&shapes)
            .any(|((n, v), (sn, s))| n != sn || v.len() != s.iter().product::<usize>())
    {
        return Err(Error::Shape("parameters do not match the network configuration".into()));
    }
    let mut offset = 0u64;
    let mut tensors = Vec::with_capacity(shapes.len());
    for (name, shape) in shapes {
        let n = shape.iter().product::<usize>() as u64;
        tensors.push(TensorEntry { name, shape, offset });
        offset += 4 * n;
    }
    let manifest = toml::to_string(&Manifest {
        config: cfg.clone(),
        tensors,
    })
    .map_err(|e| fmt_err(e.to_string()))?;
    let mut out = Vec::with_capacity(40 + manifest.len() + offset as usize);
    out.extend_from_slice(CHECKPOINT_TAG);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&offset.to_le_bytes());
    for (_, v) in named {
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(fmt_err(format!("truncated {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn take_u64(bytes: &mut &[u8], what: &str) -> Result<u64> {
    let b = take(bytes, 8, what)?;
    Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
}

/// Parses a checkpoint, checking every tensor against the stored config.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(NetworkConfig, NetworkParams<f32>)> {
    let mut rest = bytes;
    if take(&mut rest, 16, "tag")? != CHECKPOINT_TAG {
        return Err(fmt_err("missing cdnet-ckpt-v1 tag"));
    }
    let mlen = take_u64(&mut rest, "manifest length")?;
    let mlen = usize::try_from(mlen).map_err(|_| fmt_err("manifest length overflows"))?;
    let text = std::str::from_utf8(take(&mut rest, mlen, "manifest")?).map_err(|_| fmt_err("manifest is not UTF-8"))?;
    let manifest: Manifest = toml::from_str(text).map_err(|e| fmt_err(e.to_string()))?;
    let cfg = manifest.config;
    cfg.validate()?;
    let plen = take_u64(&mut rest, "payload length")?;
    if plen != rest.len() as u64 {
        return Err(fmt_err(format!(
            "payload length {} but {} bytes follow",
            plen,
            rest.len()
        )));
    }
    let payload = rest;
    let expected = tensor_shapes(&cfg);
    if manifest.tensors.len() != expected.len() {
        return Err(fmt_err(format!(
            "{} tensors listed, {} expected",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    for (entry, (name, shape)) in manifest.tensors.iter().zip(&expected) {
        if &entry.name != name || &entry.shape != shape {
            return Err(fmt_err(format!("unexpected tensor {} {:?}", entry.name, entry.shape)));
        }
        let n = shape.iter().product::<usize>() as u64;
        entry
            .offset
            .checked_add(4 * n)
            .filter(|&e| e <= plen)
            .ok_or_else(|| fmt_err(format!("tensor {} exceeds the payload", name)))?;
        if entry.offset % 4 != 0 {
            return Err(fmt_err(format!("tensor {} is misaligned", name)));
        }
    }
    let mut params = NetworkParams::<f32>::zeros(&cfg)?;
    for ((_, dst), entry) in params.named_tensors_mut().into_iter().zip(&manifest.tensors) {
        let start = entry.offset as usize;
        let src = &payload[start..start + 4 * dst.len()];
        for (d, c) in dst.iter_mut().zip(src.chunks_exact(4)) {
            *d = f32::from_le_bytes(c.try_into().expect("4 bytes"));
        }
    }
    if !params.all_finite() {
        return Err(fmt_err("non-finite parameter values"));
    }
    Ok((cfg, params))
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &NetworkParams<f32>, cfg: &NetworkConfig) -> Result<()> {
    write_atomic(path, &checkpoint_to_bytes(params, cfg)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(NetworkConfig, NetworkParams<f32>)> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}
