//! Flat binary model checkpoint.
//!
//! Layout, all little-endian:
//!
//! ```text
//! b"SFPM" | version: u32 | seq_len, d_model, n_layers, n_classes, input_dim: u32
//!         | n_prompts: u32 | parameters in declaration order: f64...
//!         | prompt values: f64...
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, PromptParams};
use crate::tensor::{ParamSet, Tensor};

pub const MAGIC: &[u8; 4] = b"SFPM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub prompt: PromptParams,
}

fn u32_field(name: &str, v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{name}={v} does not fit in u32")))
}

pub fn encode(config: &ModelConfig, params: &ParamSet, prompt: &PromptParams) -> Result<Vec<u8>> {
    let layout = config.layout();
    if layout.len() != params.len() {
        return Err(Error::Format(format!(
            "parameter set has {} entries, config expects {}",
            params.len(),
            layout.len()
        )));
    }
    let mut out = Vec::with_capacity(36 + 8 * (config.param_count() + prompt.len()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, v) in [
        ("seq_len", config.seq_len),
        ("d_model", config.d_model),
        ("n_layers", config.n_layers),
        ("n_classes", config.n_classes),
        ("input_dim", config.input_dim),
        ("n_prompts", prompt.n_prompts()),
    ] {
        out.extend_from_slice(&u32_field(name, v)?.to_le_bytes());
    }
    for ((name, shape), (have, p)) in layout.iter().zip(params.iter()) {
        if name != have {
            return Err(Error::Format(format!(
                "parameter `{have}` found where `{name}` was expected"
            )));
        }
        p.value.expect_shape("checkpoint", shape)?;
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for v in prompt.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Decodes a checkpoint; every parameter comes back trainable.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic, not an SFPM checkpoint".into()));
    }
    let header = &bytes[4..];
    if header.len() < 28 {
        return Err(Error::Format("checkpoint truncated".into()));
    }
    let word = |i: usize| {
        u32::from_le_bytes(header[4 * i..4 * i + 4].try_into().expect("4 bytes")) as usize
    };
    let version = word(0) as u32;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let config = ModelConfig {
        seq_len: word(1),
        d_model: word(2),
        n_layers: word(3),
        n_classes: word(4),
        input_dim: word(5),
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("invalid config in checkpoint: {e}")))?;
    let n_prompts = word(6);
    let body = &header[28..];
    let expected = 8 * (config.param_count() + n_prompts * config.d_model);
    if body.len() != expected {
        return Err(Error::Format(format!(
            "checkpoint payload is {} bytes, expected {expected}",
            body.len()
        )));
    }
    let mut values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut params = ParamSet::new();
    for (name, shape) in config.layout() {
        let len = shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(len).collect();
        params.insert(name, Tensor::new(shape, data)?, false)?;
    }
    let prompt = PromptParams::new(n_prompts, config.d_model, values.collect())?;
    Ok(Checkpoint {
        config,
        params,
        prompt,
    })
}

pub fn write(
    path: &Path,
    config: &ModelConfig,
    params: &ParamSet,
    prompt: &PromptParams,
) -> Result<()> {
    std::fs::write(path, encode(config, params, prompt)?)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    fn cfg() -> ModelConfig {
        ModelConfig {
            seq_len: 4,
            d_model: 8,
            n_layers: 2,
            n_classes: 3,
            input_dim: 5,
        }
    }

    #[test]
    fn header_layout() {
        let c = cfg();
        let params = build_model(&c, 1).unwrap();
        let prompt = PromptParams::init(2, 8, 1);
        let bytes = encode(&c, &params, &prompt).unwrap();
        assert_eq!(&bytes[..4], b"SFPM");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(bytes[28..32].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 32 + 8 * (c.param_count() + 16));
        let first = f64::from_le_bytes(bytes[32..40].try_into().unwrap());
        assert_eq!(
            first.to_bits(),
            params.tensor("embed.w").unwrap().data()[0].to_bits()
        );
    }

    #[test]
    fn decode_inverts_encode() {
        let c = cfg();
        let params = build_model(&c, 2).unwrap();
        let prompt = PromptParams::init(3, 8, 2);
        let back = decode(&encode(&c, &params, &prompt).unwrap()).unwrap();
        assert_eq!(back.config, c);
        assert!(back.params.bits_eq(&params));
        assert!(back.prompt.bits_eq(&prompt));
    }

    #[test]
    fn rejects_corruption() {
        let c = cfg();
        let params = build_model(&c, 2).unwrap();
        let bytes = encode(&c, &params, &PromptParams::empty(8)).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut bad = bytes;
        bad[4] = 9;
        assert!(decode(&bad).is_err());
    }
}
