use std::path::Path;

use log::info;

use super::{ImageDataset, Splits};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One label byte plus 3x32x32 channel-major pixels.
pub const CIFAR10_RECORD_BYTES: usize = 3073;
const PIXELS: usize = 3072;

/// Decodes concatenated CIFAR-10 records, scaling pixels to `[0, 1]`.
pub fn decode_cifar10<S: Scalar>(bytes: &[u8]) -> Result<ImageDataset<S>> {
    let n = bytes.len() / CIFAR10_RECORD_BYTES;
    if bytes.len() % CIFAR10_RECORD_BYTES != 0 {
        let offset = n * CIFAR10_RECORD_BYTES;
        return Err(Error::Format(format!(
            "truncated CIFAR-10 record at byte {offset}: {} of {CIFAR10_RECORD_BYTES} bytes present",
            bytes.len() - offset
        )));
    }
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * PIXELS);
    let scale = S::of(1.0 / 255.0);
    for (i, rec) in bytes.chunks_exact(CIFAR10_RECORD_BYTES).enumerate() {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::Format(format!(
                "label {label} out of range at byte {}",
                i * CIFAR10_RECORD_BYTES
            )));
        }
        labels.push(label);
        data.extend(rec[1..].iter().map(|&b| S::of(b as f64) * scale));
    }
    ImageDataset::new(Tensor::from_vec(&[n, 3, 32, 32], data)?, labels, 10)
}

pub fn load_cifar10_binary<S: Scalar>(path: impl AsRef<Path>) -> Result<ImageDataset<S>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    decode_cifar10(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Loads `data_batch_1..5.bin` as train and `test_batch.bin` as test from a
/// standard `cifar-10-batches-bin` directory. The validation split is empty.
pub fn load_cifar10_dir<S: Scalar>(dir: impl AsRef<Path>) -> Result<Splits<S>> {
    let dir = dir.as_ref();
    let mut train: Option<ImageDataset<S>> = None;
    for i in 1..=5 {
        let part = load_cifar10_binary(dir.join(format!("data_batch_{i}.bin")))?;
        train = Some(match train {
            Some(t) => t.concat(&part)?,
            None => part,
        });
    }
    let train = train.expect("five batches");
    let test = load_cifar10_binary(dir.join("test_batch.bin"))?;
    info!("loaded CIFAR-10: {} train, {} test", train.len(), test.len());
    Ok(Splits {
        val: ImageDataset::empty([3, 32, 32], 10),
        train,
        test,
        mean_image: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_record_layout() {
        let mut rec = vec![3u8];
        rec.extend(std::iter::repeat_n(255u8, PIXELS));
        let d = decode_cifar10::<f32>(&rec).unwrap();
        assert_eq!(d.labels, vec![3]);
        assert_eq!(d.images.shape(), &[1, 3, 32, 32]);
        assert!(d.images.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn channel_major_order() {
        let mut rec = vec![0u8];
        rec.extend((0..PIXELS).map(|i| (i / 1024) as u8 * 100));
        let d = decode_cifar10::<f64>(&rec).unwrap();
        assert_eq!(d.images.data()[0], 0.0);
        assert!((d.images.data()[1024] - 100.0 / 255.0).abs() < 1e-15);
        assert!((d.images.data()[2048 + 1023] - 200.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let d = decode_cifar10::<f32>(&[]).unwrap();
        assert!(d.is_empty());
    }

    #[test]
    fn truncated_record_reports_offset() {
        let bytes = vec![1u8; 2 * CIFAR10_RECORD_BYTES + 10];
        let err = decode_cifar10::<f32>(&bytes).unwrap_err().to_string();
        assert!(err.contains("byte 6146"), "{err}");
    }
}
