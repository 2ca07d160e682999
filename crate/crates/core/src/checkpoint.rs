//! Versioned binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "CDCK" | version u32 | scalar width u8 | config hash u64 | seed u64
//! | param count u32 | per param: rank u32, dims u64*rank, values, velocity
//! | buffer count u32 | per buffer: len u64, values
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{write_atomic, Reader, Writer};
use crate::nn::classifier::Classifier;
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"CDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub version: u32,
    pub scalar_width: u8,
    pub config_hash: u64,
    pub seed: u64,
}

pub fn encode_checkpoint<S: Scalar, M: Classifier<S>>(model: &M) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u8(S::WIDTH);
    w.u64(model.config_hash());
    w.u64(model.seed());
    let params = model.params();
    w.u32(params.len() as u32);
    for p in params {
        let shape = p.value.shape();
        w.u32(shape.len() as u32);
        for &d in shape {
            w.u64(d as u64);
        }
        w.scalars(p.value.data());
        w.scalars(p.velocity.data());
    }
    let buffers = model.buffers();
    w.u32(buffers.len() as u32);
    for b in buffers {
        w.u64(b.len() as u64);
        w.scalars(b);
    }
    w.into_inner()
}

fn read_header(r: &mut Reader) -> Result<CheckpointHeader> {
    r.expect_magic(MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    Ok(CheckpointHeader {
        version,
        scalar_width: r.u8()?,
        config_hash: r.u64()?,
        seed: r.u64()?,
    })
}

pub fn checkpoint_header(bytes: &[u8]) -> Result<CheckpointHeader> {
    read_header(&mut Reader::new(bytes, "checkpoint"))
}

/// Restores parameters, optimizer velocity and buffers into `model`, whose
/// architecture must hash to the value recorded in the checkpoint.
pub fn decode_checkpoint_into<S: Scalar, M: Classifier<S>>(model: &mut M, bytes: &[u8]) -> Result<CheckpointHeader> {
    let mut r = Reader::new(bytes, "checkpoint");
    let header = read_header(&mut r)?;
    if header.scalar_width != S::WIDTH {
        return Err(Error::Format(format!(
            "checkpoint holds {}-byte reals, model uses {}",
            header.scalar_width,
            S::WIDTH
        )));
    }
    if header.config_hash != model.config_hash() {
        return Err(Error::Config(format!(
            "architecture hash mismatch: checkpoint {:016x}, config {:016x}",
            header.config_hash,
            model.config_hash()
        )));
    }
    let count = r.u32()? as usize;
    let mut params = model.params_mut();
    if count != params.len() {
        return Err(Error::Format(format!("checkpoint has {count} params, model {}", params.len())));
    }
    for (i, p) in params.iter_mut().enumerate() {
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        if shape != p.value.shape() {
            return Err(Error::Format(format!(
                "param {i}: shape {:?} in checkpoint, {:?} in model",
                shape,
                p.value.shape()
            )));
        }
        let n = p.value.len();
        let values = r.scalars::<S>(n)?;
        let velocity = r.scalars::<S>(n)?;
        p.value.data_mut().copy_from_slice(&values);
        p.velocity.data_mut().copy_from_slice(&velocity);
        p.zero_grad();
    }
    drop(params);
    let count = r.u32()? as usize;
    let mut buffers = model.buffers_mut();
    if count != buffers.len() {
        return Err(Error::Format(format!("checkpoint has {count} buffers, model {}", buffers.len())));
    }
    for (i, b) in buffers.iter_mut().enumerate() {
        let n = r.len(S::WIDTH as usize)?;
        if n != b.len() {
            return Err(Error::Format(format!("buffer {i}: length {n} in checkpoint, {} in model", b.len())));
        }
        b.copy_from_slice(&r.scalars::<S>(n)?);
    }
    r.finish()?;
    Ok(header)
}

pub fn save_checkpoint<S: Scalar, M: Classifier<S>>(model: &M, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model))
}

pub fn load_checkpoint_into<S: Scalar, M: Classifier<S>>(model: &mut M, path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint_into(model, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dropout::{DropoutSpec, DropoutVariant};
    use crate::nn::classifier::Pass;
    use crate::resnet::{ResNet, ResNetConfig};
    use crate::tensor::Tensor;

    fn cfg(rate: f64) -> ResNetConfig {
        ResNetConfig {
            stage_channels: vec![2, 3],
            blocks_per_stage: 1,
            num_classes: 2,
            input_shape: [1, 4, 4],
            dropout: DropoutSpec::new(DropoutVariant::Element, rate).unwrap(),
            final_fc_dropout_rate: 0.1,
        }
    }

    #[test]
    fn roundtrip_restores_outputs() {
        let mut a = ResNet::<f32>::new(cfg(0.2), 1).unwrap();
        let x = Tensor::from_vec(&[2, 1, 4, 4], (0..32).map(|i| i as f32 / 10.0).collect()).unwrap();
        a.compute_gradients(&x, &[0, 1], &Pass::train(0, 0)).unwrap();
        let bytes = encode_checkpoint(&a);
        let header = checkpoint_header(&bytes).unwrap();
        assert_eq!(header.seed, 1);
        let mut b = ResNet::<f32>::new(cfg(0.2), header.seed).unwrap();
        b.params_mut()[0].value.data_mut()[0] = 99.0;
        decode_checkpoint_into(&mut b, &bytes).unwrap();
        let pass = Pass::deterministic();
        assert_eq!(a.forward_pass(&x, &pass).unwrap(), b.forward_pass(&x, &pass).unwrap());
        assert_eq!(encode_checkpoint(&b), bytes);
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let a = ResNet::<f32>::new(cfg(0.2), 1).unwrap();
        let mut b = ResNet::<f32>::new(cfg(0.3), 1).unwrap();
        let err = decode_checkpoint_into(&mut b, &encode_checkpoint(&a)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let mut wide = ResNet::<f64>::new(cfg(0.2), 1).unwrap();
        assert!(matches!(decode_checkpoint_into(&mut wide, &encode_checkpoint(&a)), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_file_is_format_error() {
        let a = ResNet::<f32>::new(cfg(0.2), 1).unwrap();
        let bytes = encode_checkpoint(&a);
        let mut b = a.clone();
        assert!(matches!(decode_checkpoint_into(&mut b, &bytes[..bytes.len() - 3]), Err(Error::Format(_))));
    }
}
