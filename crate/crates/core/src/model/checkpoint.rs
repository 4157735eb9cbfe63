//! Versioned binary checkpoint: architecture header, every tensor in
//! [`ModelParams::tensors`] order, trailing SHA-256.

use std::path::Path;

use crate::attention::AttentionKind;
use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::model::layers::Activation;
use crate::model::{DropoutRates, ModelConfig, ModelParams, ResidualSource};
use crate::real::{DType, Real};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PMLPCKP1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub params: ModelParams<T>,
    pub seed: u64,
    pub stage: u64,
}

pub fn encode_checkpoint<T: Real>(params: &ModelParams<T>, seed: u64, stage: u64) -> Vec<u8> {
    let cfg = &params.config;
    let mut w = Writer::default();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u32(T::DTYPE.code());
    w.u8(cfg.attention.code());
    match cfg.activation {
        Activation::LeakyRelu { slope } => {
            w.u8(0);
            w.f64(slope);
        }
        Activation::Sigmoid => {
            w.u8(1);
            w.f64(0.0);
        }
    }
    w.u8(cfg.jk_include_step0 as u8);
    w.u8(match cfg.residual {
        ResidualSource::Combined => 0,
        ResidualSource::Raw => 1,
    });
    for v in [
        cfg.feature_width,
        cfg.hops,
        cfg.hidden,
        cfg.num_layers,
        cfg.num_classes,
        cfg.jk_layers,
        cfg.label_layers,
    ] {
        w.u64(v as u64);
    }
    w.f64(cfg.dropout.input);
    w.f64(cfg.dropout.attention);
    w.f64(cfg.dropout.hidden);
    w.u64(seed);
    w.u64(stage);
    let tensors = params.tensors();
    w.u32(tensors.len() as u32);
    for t in tensors {
        w.u64(t.len() as u64);
        w.reals(t);
    }
    w.seal();
    w.buf
}

pub fn save_checkpoint<T: Real>(path: &Path, params: &ModelParams<T>, seed: u64, stage: u64) -> Result<()> {
    binio::write_file(path, &encode_checkpoint(params, seed, stage))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = binio::read_file(path)?;
    decode_checkpoint(&bytes, path)
}

/// Element type a checkpoint was written with.
pub fn checkpoint_dtype(path: &Path) -> Result<DType> {
    let bytes = binio::read_file(path)?;
    let mut r = Reader::new(&bytes, path);
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let _version = r.u32()?;
    let code = r.u32()?;
    DType::from_code(code).ok_or_else(|| Error::format(path, format!("unknown dtype code {code}")))
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8], path: &Path) -> Result<Checkpoint<T>> {
    if bytes.len() < 8 + 32 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let body_len = bytes.len() - 32;
    if binio::sha256(&bytes[..body_len]) != bytes[body_len..] {
        return Err(Error::Corruption {
            path: path.to_path_buf(),
        });
    }
    let mut r = Reader::new(&bytes[..body_len], path);
    r.take(8)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let code = r.u32()?;
    let dtype = DType::from_code(code)
        .ok_or_else(|| Error::format(path, format!("unknown dtype code {code}")))?;
    if dtype != T::DTYPE {
        return Err(Error::format(
            path,
            format!("checkpoint stored as {}, requested {}", dtype.name(), T::DTYPE.name()),
        ));
    }
    let kind_code = r.u8()?;
    let attention = AttentionKind::from_code(kind_code)
        .ok_or_else(|| Error::format(path, format!("unknown attention code {kind_code}")))?;
    let act_code = r.u8()?;
    let slope = r.f64()?;
    let activation = match act_code {
        0 => Activation::LeakyRelu { slope },
        1 => Activation::Sigmoid,
        other => return Err(Error::format(path, format!("unknown activation code {other}"))),
    };
    let jk_include_step0 = r.u8()? != 0;
    let residual = match r.u8()? {
        0 => ResidualSource::Combined,
        1 => ResidualSource::Raw,
        other => return Err(Error::format(path, format!("unknown residual code {other}"))),
    };
    let mut dims = [0usize; 7];
    for v in &mut dims {
        *v = r.usize()?;
    }
    let dropout = DropoutRates {
        input: r.f64()?,
        attention: r.f64()?,
        hidden: r.f64()?,
    };
    let seed = r.u64()?;
    let stage = r.u64()?;
    let config = ModelConfig {
        attention,
        activation,
        feature_width: dims[0],
        hops: dims[1],
        hidden: dims[2],
        num_layers: dims[3],
        num_classes: dims[4],
        jk_layers: dims[5],
        label_layers: dims[6],
        jk_include_step0,
        residual,
        dropout,
    };
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.usize()?;
        tensors.push(r.reals::<T>(dtype, len)?);
    }
    if r.remaining() != 0 {
        return Err(Error::format(path, "trailing bytes after tensors"));
    }
    let params = ModelParams::from_tensors(config, tensors)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(Checkpoint { params, seed, stage })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(kind: AttentionKind) -> ModelConfig {
        ModelConfig {
            attention: kind,
            activation: Activation::Sigmoid,
            feature_width: 3,
            hops: 2,
            hidden: 4,
            num_layers: 1,
            num_classes: 2,
            jk_layers: 2,
            jk_include_step0: true,
            label_layers: 1,
            residual: ResidualSource::Raw,
            dropout: DropoutRates {
                input: 0.1,
                attention: 0.2,
                hidden: 0.3,
            },
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for kind in [AttentionKind::Smoothing, AttentionKind::Recursive, AttentionKind::Jk, AttentionKind::Uniform] {
            let path = dir.path().join(format!("{kind}.ckpt"));
            let params = ModelParams::<f32>::init(config(kind), 17).unwrap();
            save_checkpoint(&path, &params, 99, 2).unwrap();
            let loaded = load_checkpoint::<f32>(&path).unwrap();
            assert_eq!(loaded.seed, 99);
            assert_eq!(loaded.stage, 2);
            assert_eq!(loaded.params.config, params.config);
            for (a, b) in loaded.params.tensors().iter().zip(params.tensors()) {
                let bits_a: Vec<u32> = a.iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u32> = b.iter().map(|v| v.to_bits()).collect();
                assert_eq!(bits_a, bits_b);
            }
            assert_eq!(encode_checkpoint(&loaded.params, 99, 2), std::fs::read(&path).unwrap());
            assert_eq!(checkpoint_dtype(&path).unwrap(), DType::F32);
        }
    }

    #[test]
    fn damage_is_detected() {
        let params = ModelParams::<f64>::init(config(AttentionKind::Jk), 1).unwrap();
        let bytes = encode_checkpoint(&params, 1, 1);
        let path = Path::new("mem.ckpt");
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(decode_checkpoint::<f64>(&flipped, path), Err(Error::Corruption { .. })));
        assert!(matches!(decode_checkpoint::<f32>(&bytes, path), Err(Error::Format { .. })));
        assert!(matches!(decode_checkpoint::<f64>(&bytes[..20], path), Err(Error::Corruption { .. } | Error::Format { .. })));
    }
}
