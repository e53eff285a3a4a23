//! Self-describing binary checkpoint: a version field, the run
//! configuration snapshot, then a length-prefixed name/shape directory
//! followed by raw little-endian tensor payloads. Round trips are
//! bit-exact at the stored precision.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! u32 version | u8 dtype | u32 epoch | u32 config_len | config bytes
//! u32 n_tensors
//! per tensor: u16 name_len | name | u8 ndim | u32 dims...
//! payloads in directory order, numel * dtype_size bytes each
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Real, Tensor};

pub const FORMAT_VERSION: u32 = 1;

pub struct LoadedCheckpoint<T: Real> {
    pub epoch: u32,
    /// Flat key=value configuration snapshot, in stored order.
    pub config: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<T>)>,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

pub fn save_checkpoint<T: Real>(
    path: &Path,
    epoch: u32,
    config: &[(String, String)],
    tensors: &[(&str, &Tensor<T>)],
) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    let mut buf = Vec::new();
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.push(T::DTYPE.tag());

    let config_text: String = config
        .iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect();
    buf.extend_from_slice(&epoch.to_le_bytes());
    buf.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(config_text.as_bytes());

    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in tensors {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(tensor.rank() as u8);
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for (_, tensor) in tensors {
        for &v in tensor.data().iter() {
            v.write_le(&mut buf);
        }
    }
    out.write_all(&buf).map_err(|e| io_err(path, e))?;
    out.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CheckpointCorrupt(format!(
                "unexpected end of file at offset {}",
                self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Element type stored in a checkpoint, without loading the tensors.
pub fn checkpoint_dtype(path: &Path) -> Result<Dtype> {
    let mut reader = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    let mut head = [0u8; 5];
    reader.read_exact(&mut head).map_err(|e| io_err(path, e))?;
    let version = u32::from_le_bytes(head[..4].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion { expected: FORMAT_VERSION, got: version });
    }
    Dtype::from_tag(head[4])
        .ok_or_else(|| Error::CheckpointCorrupt(format!("unknown dtype tag {}", head[4])))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<LoadedCheckpoint<T>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(|e| io_err(path, e))?)
        .read_to_end(&mut bytes)
        .map_err(|e| io_err(path, e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };

    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion { expected: FORMAT_VERSION, got: version });
    }
    let dtype = Dtype::from_tag(cur.u8()?)
        .ok_or_else(|| Error::CheckpointCorrupt("unknown dtype tag".to_string()))?;
    if dtype != T::DTYPE {
        return Err(Error::CheckpointDtype {
            expected: T::DTYPE.name(),
            got: dtype.name().to_string(),
        });
    }
    let epoch = cur.u32()?;
    let config_len = cur.u32()? as usize;
    let config_text = std::str::from_utf8(cur.take(config_len)?)
        .map_err(|_| Error::CheckpointCorrupt("config block is not UTF-8".to_string()))?;
    let config: Vec<(String, String)> = config_text
        .lines()
        .filter_map(|line| {
            line.split_once('=').map(|(k, v)| (k.to_string(), v.to_string()))
        })
        .collect();

    let n_tensors = cur.u32()? as usize;
    let mut directory = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::CheckpointCorrupt("tensor name is not UTF-8".to_string()))?
            .to_string();
        let ndim = cur.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(cur.u32()? as usize);
        }
        directory.push((name, dims));
    }
    let elem = T::DTYPE.size();
    let mut tensors = Vec::with_capacity(n_tensors);
    for (name, dims) in directory {
        let numel: usize = dims.iter().product();
        let raw = cur.take(numel * elem)?;
        let data: Vec<T> = raw.chunks_exact(elem).map(T::read_le).collect();
        let tensor = Tensor::from_vec(&dims, data)
            .map_err(|e| Error::CheckpointCorrupt(format!("tensor {name}: {e}")))?;
        tensors.push((name, tensor));
    }
    if cur.pos != bytes.len() {
        return Err(Error::CheckpointCorrupt(format!(
            "{} trailing bytes after payloads",
            bytes.len() - cur.pos
        )));
    }
    Ok(LoadedCheckpoint { epoch, config, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_tensors() -> Vec<(String, Tensor<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        vec![
            ("alpha".to_string(), Tensor::randn(&[3, 4], 1.0, &mut rng)),
            ("beta".to_string(), Tensor::randn(&[2, 2, 2], 0.3, &mut rng)),
            ("gamma".to_string(), Tensor::scalar(-0.125)),
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let tensors = sample_tensors();
        let refs: Vec<(&str, &Tensor<f64>)> =
            tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let config = vec![
            ("dataset".to_string(), "mnist".to_string()),
            ("seed".to_string(), "7".to_string()),
        ];
        save_checkpoint(&path, 5, &config, &refs).unwrap();

        let loaded = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(loaded.epoch, 5);
        assert_eq!(loaded.config, config);
        assert_eq!(loaded.tensors.len(), 3);
        for ((name, original), (got_name, got)) in tensors.iter().zip(&loaded.tensors) {
            assert_eq!(name, got_name);
            assert_eq!(original.shape(), got.shape());
            let a = original.to_vec();
            let b = got.to_vec();
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn f32_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model32.ckpt");
        let t = Tensor::<f32>::from_vec(&[3], vec![0.1, -2.5e-8, 3.0e7]).unwrap();
        save_checkpoint(&path, 1, &[], &[("t", &t)]).unwrap();
        assert_eq!(checkpoint_dtype(&path).unwrap(), Dtype::F32);
        let loaded = load_checkpoint::<f32>(&path).unwrap();
        for (x, y) in t.to_vec().iter().zip(loaded.tensors[0].1.to_vec().iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("future.ckpt");
        let t = Tensor::<f64>::scalar(1.0);
        save_checkpoint(&path, 0, &[], &[("t", &t)]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = 99;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint::<f64>(&path),
            Err(Error::CheckpointVersion { expected: FORMAT_VERSION, got: 99 })
        ));
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f32.ckpt");
        let t = Tensor::<f32>::scalar(1.0);
        save_checkpoint(&path, 0, &[], &[("t", &t)]).unwrap();
        assert!(matches!(
            load_checkpoint::<f64>(&path),
            Err(Error::CheckpointDtype { .. })
        ));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cut.ckpt");
        let t = Tensor::<f64>::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        save_checkpoint(&path, 0, &[], &[("t", &t)]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            load_checkpoint::<f64>(&path),
            Err(Error::CheckpointCorrupt(_))
        ));
    }
}
