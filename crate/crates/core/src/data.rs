//! IDX-format dataset ingestion (MNIST / Fashion-MNIST), train/validation
//! splitting, pixel scaling, and deterministic seeded batching.
//!
//! IDX files are big-endian: a magic number, one u32 per dimension, then
//! raw unsigned bytes. Images use magic 0x00000803 (`[n, rows, cols]`),
//! labels 0x00000801 (`[n]`). Gzip-compressed files are detected by their
//! 0x1f 0x8b leading bytes and inflated transparently.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw IDX payload: dimensions from the header plus the exact bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawIdx {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub bytes: Vec<u8>,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = BufReader::new(file);
    let mut raw = Vec::new();
    reader.read_to_end(&mut raw).map_err(|e| io_err(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut inflated = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut inflated)
            .map_err(|e| io_err(path, e))?;
        Ok(inflated)
    } else {
        Ok(raw)
    }
}

fn parse_idx(path: &Path, raw: &[u8], expected_magic: u32) -> Result<RawIdx> {
    let ndims = match expected_magic {
        IMAGES_MAGIC => 3,
        LABELS_MAGIC => 1,
        _ => unreachable!("unsupported magic requested"),
    };
    let header_len = 4 + 4 * ndims;
    if raw.len() < 4 {
        return Err(Error::IdxTruncated { path: path.to_path_buf(), what: "header" });
    }
    let magic = u32::from_be_bytes(raw[0..4].try_into().unwrap());
    if magic != expected_magic {
        return Err(Error::IdxMagic { path: path.to_path_buf(), expected: expected_magic, got: magic });
    }
    if raw.len() < header_len {
        return Err(Error::IdxTruncated { path: path.to_path_buf(), what: "header" });
    }
    let mut dims = Vec::with_capacity(ndims);
    for d in 0..ndims {
        let off = 4 + 4 * d;
        dims.push(u32::from_be_bytes(raw[off..off + 4].try_into().unwrap()) as usize);
    }
    let expected_len: usize = dims.iter().product();
    let payload = &raw[header_len..];
    if payload.len() < expected_len {
        return Err(Error::IdxTruncated { path: path.to_path_buf(), what: "payload" });
    }
    if payload.len() > expected_len {
        return Err(Error::IdxDims {
            path: path.to_path_buf(),
            detail: format!("dims {dims:?} declare {expected_len} bytes, file holds {}", payload.len()),
        });
    }
    Ok(RawIdx { magic, dims, bytes: payload.to_vec() })
}

/// Loads an IDX image file (`magic 0x00000803`, `[n, rows, cols]` bytes).
pub fn load_idx_images(path: &Path) -> Result<RawIdx> {
    parse_idx(path, &read_all(path)?, IMAGES_MAGIC)
}

/// Loads an IDX label file (`magic 0x00000801`, `[n]` bytes).
pub fn load_idx_labels(path: &Path) -> Result<RawIdx> {
    parse_idx(path, &read_all(path)?, LABELS_MAGIC)
}

/// Serializes an IDX structure back to disk, byte-exact.
pub fn write_idx(path: &Path, idx: &RawIdx) -> Result<()> {
    let mut file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut header = Vec::with_capacity(4 + 4 * idx.dims.len());
    header.extend_from_slice(&idx.magic.to_be_bytes());
    for &d in &idx.dims {
        header.extend_from_slice(&(d as u32).to_be_bytes());
    }
    file.write_all(&header).map_err(|e| io_err(path, e))?;
    file.write_all(&idx.bytes).map_err(|e| io_err(path, e))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

/// One split of a dataset. Pixels are kept as raw bytes; batches scale them
/// to `[0, 1]` on assembly.
#[derive(Clone)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub rows: usize,
    pub cols: usize,
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

impl DatasetSplit {
    fn new(name: SplitName, rows: usize, cols: usize, pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if pixels.len() != labels.len() * rows * cols {
            return Err(Error::DataLength {
                expected: labels.len() * rows * cols,
                got: pixels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
            return Err(Error::InvalidConfig(format!("label {bad} outside [0, 9]")));
        }
        Ok(DatasetSplit { name, rows, cols, pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, index: usize) -> u8 {
        self.labels[index]
    }

    /// Number of samples per class label.
    pub fn class_counts(&self) -> [usize; 10] {
        let mut counts = [0usize; 10];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Keeps only the first `limit` samples (0 keeps everything).
    pub fn truncate(&mut self, limit: usize) {
        if limit > 0 && limit < self.len() {
            self.labels.truncate(limit);
            self.pixels.truncate(limit * self.rows * self.cols);
        }
    }

    /// Assembles `[len(indices), 1, rows, cols]` images scaled by 1/255 and
    /// the matching labels.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let plane = self.rows * self.cols;
        let scale = T::c(1.0 / 255.0);
        let mut data = Vec::with_capacity(indices.len() * plane);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let src = &self.pixels[i * plane..(i + 1) * plane];
            data.extend(src.iter().map(|&b| T::c(b as f64) * scale));
            labels.push(self.labels[i] as usize);
        }
        let images = Tensor::from_vec(&[indices.len(), 1, self.rows, self.cols], data)
            .expect("batch shape is consistent by construction");
        (images, labels)
    }

    /// The split's images re-encoded as a raw IDX structure.
    pub fn to_raw_images(&self) -> RawIdx {
        RawIdx {
            magic: IMAGES_MAGIC,
            dims: vec![self.len(), self.rows, self.cols],
            bytes: self.pixels.clone(),
        }
    }

    pub fn to_raw_labels(&self) -> RawIdx {
        RawIdx { magic: LABELS_MAGIC, dims: vec![self.len()], bytes: self.labels.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    FashionMnist,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::FashionMnist => "fashion-mnist",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mnist" => Some(DatasetKind::Mnist),
            "fashion-mnist" => Some(DatasetKind::FashionMnist),
            _ => None,
        }
    }

    /// Directory under the data root holding this dataset's IDX files.
    pub fn subdir(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::FashionMnist => "fashion",
        }
    }
}

pub struct Dataset {
    pub train: DatasetSplit,
    pub val: DatasetSplit,
    pub test: DatasetSplit,
}

/// Resolves `name` or `name.gz` under `dir`.
fn resolve(dir: &Path, name: &str) -> Result<PathBuf> {
    let plain = dir.join(name);
    if plain.exists() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{name}.gz"));
    if gz.exists() {
        return Ok(gz);
    }
    Err(Error::Io {
        path: plain,
        source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found"),
    })
}

/// Splits the raw training set into train/val with a seeded shuffle and
/// wraps the test set; all three scale pixels on batch assembly.
pub fn split_and_normalize(
    train_images: RawIdx,
    train_labels: RawIdx,
    test_images: RawIdx,
    test_labels: RawIdx,
    val_fraction: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "val fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    let (rows, cols) = (train_images.dims[1], train_images.dims[2]);
    let n = train_images.dims[0];
    if train_labels.dims[0] != n {
        return Err(Error::DataLength { expected: n, got: train_labels.dims[0] });
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let val_count = ((n as f64) * val_fraction).round() as usize;
    let train_count = n - val_count;
    let plane = rows * cols;
    let gather = |idxs: &[usize]| {
        let mut pixels = Vec::with_capacity(idxs.len() * plane);
        let mut labels = Vec::with_capacity(idxs.len());
        for &i in idxs {
            pixels.extend_from_slice(&train_images.bytes[i * plane..(i + 1) * plane]);
            labels.push(train_labels.bytes[i]);
        }
        (pixels, labels)
    };
    let (train_pixels, train_lab) = gather(&order[..train_count]);
    let (val_pixels, val_lab) = gather(&order[train_count..]);

    let train = DatasetSplit::new(SplitName::Train, rows, cols, train_pixels, train_lab)?;
    let val = DatasetSplit::new(SplitName::Val, rows, cols, val_pixels, val_lab)?;
    let test = DatasetSplit::new(
        SplitName::Test,
        test_images.dims[1],
        test_images.dims[2],
        test_images.bytes,
        test_labels.bytes,
    )?;
    Ok(Dataset { train, val, test })
}

/// Loads the canonical four IDX files for `kind` from `data_root/<subdir>/`.
pub fn load_dataset(
    data_root: &Path,
    kind: DatasetKind,
    val_fraction: f64,
    seed: u64,
) -> Result<Dataset> {
    let dir = data_root.join(kind.subdir());
    let train_images = load_idx_images(&resolve(&dir, "train-images-idx3-ubyte")?)?;
    let train_labels = load_idx_labels(&resolve(&dir, "train-labels-idx1-ubyte")?)?;
    let test_images = load_idx_images(&resolve(&dir, "t10k-images-idx3-ubyte")?)?;
    let test_labels = load_idx_labels(&resolve(&dir, "t10k-labels-idx1-ubyte")?)?;
    split_and_normalize(train_images, train_labels, test_images, test_labels, val_fraction, seed)
}

/// Seeded epoch-by-epoch permutation source. Each call to
/// [`BatchPlan::epoch_order`] advances the stream; the same seed always
/// yields the same sequence of permutations.
pub struct BatchPlan {
    rng: ChaCha8Rng,
    pub batch_size: usize,
    n: usize,
}

impl BatchPlan {
    pub fn new(seed: u64, batch_size: usize, n: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".to_string()));
        }
        Ok(BatchPlan { rng: ChaCha8Rng::seed_from_u64(seed), batch_size, n })
    }

    /// Permutation of `[0, n)` for the next epoch.
    pub fn epoch_order(&mut self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.n).collect();
        order.shuffle(&mut self.rng);
        order
    }

    /// Batches of the next epoch's permutation; the final batch may be short.
    pub fn epoch_batches(&mut self) -> Vec<Vec<usize>> {
        self.epoch_order()
            .chunks(self.batch_size)
            .map(|c| c.to_vec())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn golden_images() -> RawIdx {
        RawIdx {
            magic: IMAGES_MAGIC,
            dims: vec![2, 2, 2],
            bytes: vec![0, 64, 128, 255, 10, 20, 30, 40],
        }
    }

    #[test]
    fn golden_file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("two-images-idx3-ubyte");
        let idx = golden_images();
        write_idx(&path, &idx).unwrap();
        let loaded = load_idx_images(&path).unwrap();
        assert_eq!(loaded, idx);
    }

    #[test]
    fn gzip_variant_detected_by_magic_bytes() {
        use flate2::{write::GzEncoder, Compression};
        let dir = tempfile::tempdir().unwrap();
        let plain = dir.path().join("plain");
        write_idx(&plain, &golden_images()).unwrap();
        let gz_path = dir.path().join("compressed.gz");
        let mut enc = GzEncoder::new(File::create(&gz_path).unwrap(), Compression::default());
        enc.write_all(&std::fs::read(&plain).unwrap()).unwrap();
        enc.finish().unwrap();
        assert_eq!(load_idx_images(&gz_path).unwrap(), golden_images());
    }

    #[test]
    fn truncated_header_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short");
        std::fs::write(&path, [0, 0, 8]).unwrap();
        assert!(matches!(
            load_idx_images(&path),
            Err(Error::IdxTruncated { what: "header", .. })
        ));
    }

    #[test]
    fn truncated_payload_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short-payload");
        let mut idx = golden_images();
        idx.bytes.pop();
        // write manually: write_idx would produce a consistent file
        let mut raw = idx.magic.to_be_bytes().to_vec();
        for d in &idx.dims {
            raw.extend_from_slice(&(*d as u32).to_be_bytes());
        }
        raw.extend_from_slice(&idx.bytes);
        std::fs::write(&path, raw).unwrap();
        assert!(matches!(
            load_idx_images(&path),
            Err(Error::IdxTruncated { what: "payload", .. })
        ));
    }

    #[test]
    fn images_magic_in_label_slot_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mislabeled");
        write_idx(&path, &golden_images()).unwrap();
        let err = load_idx_labels(&path).unwrap_err();
        match err {
            Error::IdxMagic { expected, got, .. } => {
                assert_eq!(expected, LABELS_MAGIC);
                assert_eq!(got, IMAGES_MAGIC);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    fn synthetic_raw(n: usize) -> (RawIdx, RawIdx) {
        let images = RawIdx {
            magic: IMAGES_MAGIC,
            dims: vec![n, 2, 2],
            bytes: (0..n * 4).map(|i| (i % 251) as u8).collect(),
        };
        let labels = RawIdx {
            magic: LABELS_MAGIC,
            dims: vec![n],
            bytes: (0..n).map(|i| (i % 10) as u8).collect(),
        };
        (images, labels)
    }

    #[test]
    fn split_counts_and_determinism() {
        let (ti, tl) = synthetic_raw(100);
        let (test_i, test_l) = synthetic_raw(10);
        let a = split_and_normalize(ti.clone(), tl.clone(), test_i.clone(), test_l.clone(), 0.2, 7)
            .unwrap();
        assert_eq!(a.train.len(), 80);
        assert_eq!(a.val.len(), 20);
        assert_eq!(a.test.len(), 10);

        let b = split_and_normalize(ti, tl, test_i, test_l, 0.2, 7).unwrap();
        assert_eq!(a.train.to_raw_images(), b.train.to_raw_images());
        assert_eq!(a.val.to_raw_labels(), b.val.to_raw_labels());
    }

    #[test]
    fn split_partitions_without_overlap() {
        // image payloads are unique per sample here, so multiset equality
        // of (pixels, label) pairs proves the partition property
        let (ti, tl) = synthetic_raw(50);
        let (test_i, test_l) = synthetic_raw(5);
        let ds = split_and_normalize(ti.clone(), tl, test_i, test_l, 0.3, 3).unwrap();
        let mut seen: Vec<Vec<u8>> = Vec::new();
        for split in [&ds.train, &ds.val] {
            let raw = split.to_raw_images();
            for i in 0..split.len() {
                seen.push(raw.bytes[i * 4..(i + 1) * 4].to_vec());
            }
        }
        seen.sort();
        let mut want: Vec<Vec<u8>> = (0..50).map(|i| ti.bytes[i * 4..(i + 1) * 4].to_vec()).collect();
        want.sort();
        assert_eq!(seen, want);
    }

    #[test]
    fn batch_scales_to_unit_interval() {
        let (ti, tl) = synthetic_raw(10);
        let (test_i, test_l) = synthetic_raw(2);
        let ds = split_and_normalize(ti, tl, test_i, test_l, 0.2, 1).unwrap();
        let (images, labels) = ds.train.batch::<f64>(&[0, 3]);
        assert_eq!(images.shape(), &[2, 1, 2, 2]);
        assert_eq!(labels.len(), 2);
        assert!(images.to_vec().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn batch_plan_is_a_reproducible_permutation() {
        let mut a = BatchPlan::new(11, 4, 10).unwrap();
        let mut b = BatchPlan::new(11, 4, 10).unwrap();
        for _ in 0..3 {
            let oa = a.epoch_order();
            let ob = b.epoch_order();
            assert_eq!(oa, ob);
            let mut sorted = oa.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        }
        // batches cover the epoch order exactly
        let mut c = BatchPlan::new(11, 4, 10).unwrap();
        let batches = c.epoch_batches();
        assert_eq!(batches.iter().map(|b| b.len()).sum::<usize>(), 10);
        assert_eq!(batches[0].len(), 4);
        assert_eq!(batches[2].len(), 2);
    }

    #[test]
    fn truncate_keeps_prefix() {
        let (ti, tl) = synthetic_raw(30);
        let (test_i, test_l) = synthetic_raw(2);
        let ds = split_and_normalize(ti, tl, test_i, test_l, 0.2, 5).unwrap();
        let mut t = ds.train.clone();
        let full = t.to_raw_images();
        t.truncate(7);
        assert_eq!(t.len(), 7);
        assert_eq!(t.to_raw_images().bytes[..], full.bytes[..7 * 4]);
        let mut unchanged = ds.train.clone();
        unchanged.truncate(0);
        assert_eq!(unchanged.len(), 24);
    }
}
