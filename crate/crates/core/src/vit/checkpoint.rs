//! Checkpoint file: the magic `BPXVIT01`, a little-endian u64 header length,
//! a JSON header (`config` plus the tensor names and lengths), then every
//! parameter as a little-endian f64 in [`ParamSet::tensors`] order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ViTConfig;
use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"BPXVIT01";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ViTConfig,
    tensors: Vec<(String, usize)>,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

pub fn encode_checkpoint<T: Scalar>(config: &ViTConfig, params: &ParamSet<T>) -> Result<Vec<u8>> {
    let header = Header {
        config: config.clone(),
        tensors: params
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, t.len()))
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * params.num_values());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in params.flatten() {
        out.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(ViTConfig, ParamSet<T>)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    header.config.validate()?;
    let mut params = ParamSet::<T>::zeros(&header.config);
    let expect: Vec<(String, usize)> = params
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.len()))
        .collect();
    if expect != header.tensors {
        return Err(bad("tensor table does not match config"));
    }
    let data = &bytes[16 + hlen..];
    if data.len() != 8 * params.num_values() {
        return Err(bad(format!(
            "expected {} values, found {} bytes",
            params.num_values(),
            data.len()
        )));
    }
    let values: Vec<T> = data
        .chunks_exact(8)
        .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
        .collect();
    params.load_flat(&values);
    Ok((header.config, params))
}

pub fn write_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    config: &ViTConfig,
    params: &ParamSet<T>,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(config, params)?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(ViTConfig, ParamSet<T>)> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::init_params;

    #[test]
    fn round_trip() {
        let cfg = ViTConfig {
            use_positional_embedding: true,
            num_layers: 1,
            ..ViTConfig::default()
        };
        let p: ParamSet<f64> = init_params(&cfg);
        let bytes = encode_checkpoint(&cfg, &p).unwrap();
        let (c2, p2) = decode_checkpoint::<f64>(&bytes).unwrap();
        assert_eq!((c2, p2), (cfg.clone(), p));
        assert!(decode_checkpoint::<f64>(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_checkpoint::<f64>(b"nope").is_err());
    }
}
