//! Crate-wide error type.

use std::fmt;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Two operands have shapes that the named operation cannot combine.
    ShapeMismatch {
        op: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A constructor received data whose length does not match the shape.
    DataLength { expected: usize, got: usize },
    /// An axis index is out of range for the tensor's rank.
    InvalidAxis { axis: usize, rank: usize },
    /// A convolution kernel is larger than its input plane.
    KernelTooLarge {
        input: (usize, usize),
        kernel: (usize, usize),
    },
    /// Batch normalization in training mode needs at least two samples.
    DegenerateBatch,
    /// `backward` was called on a non-scalar tensor.
    BackwardNonScalar { numel: usize },
    /// `backward` was called on a tensor with no recorded graph.
    BackwardDetached,
    /// A tensor holds NaN or infinite values.
    NonFinite { context: String },
    /// A configuration value violates its documented constraints.
    InvalidConfig(String),
    /// Training produced a non-finite loss.
    NonFiniteLoss { epoch: usize, batch: usize },
    /// Filesystem error with the offending path.
    Io { path: PathBuf, source: std::io::Error },
    /// An IDX file starts with an unexpected magic number.
    IdxMagic { path: PathBuf, expected: u32, got: u32 },
    /// An IDX file ended before the declared header or payload.
    IdxTruncated { path: PathBuf, what: &'static str },
    /// An IDX header declares dimensions inconsistent with the payload.
    IdxDims { path: PathBuf, detail: String },
    /// A checkpoint file carries an unsupported format version.
    CheckpointVersion { expected: u32, got: u32 },
    /// A checkpoint file is structurally invalid.
    CheckpointCorrupt(String),
    /// A checkpoint stores a different element type than requested.
    CheckpointDtype { expected: &'static str, got: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Error::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape (expected {expected})")
            }
            Error::InvalidAxis { axis, rank } => {
                write!(f, "axis {axis} out of range for rank {rank}")
            }
            Error::KernelTooLarge { input, kernel } => write!(
                f,
                "kernel {}x{} larger than input plane {}x{}",
                kernel.0, kernel.1, input.0, input.1
            ),
            Error::DegenerateBatch => {
                write!(f, "batch normalization requires batch size >= 2 in training mode")
            }
            Error::BackwardNonScalar { numel } => {
                write!(f, "backward requires a scalar loss, got {numel} elements")
            }
            Error::BackwardDetached => {
                write!(f, "backward on a tensor with no recorded operations")
            }
            Error::NonFinite { context } => write!(f, "non-finite values in {context}"),
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::NonFiniteLoss { epoch, batch } => {
                write!(f, "non-finite loss at epoch {epoch}, batch {batch}")
            }
            Error::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Error::IdxMagic { path, expected, got } => write!(
                f,
                "{}: bad IDX magic {got:#010x} (expected {expected:#010x})",
                path.display()
            ),
            Error::IdxTruncated { path, what } => {
                write!(f, "{}: truncated IDX {what}", path.display())
            }
            Error::IdxDims { path, detail } => {
                write!(f, "{}: inconsistent IDX dimensions: {detail}", path.display())
            }
            Error::CheckpointVersion { expected, got } => {
                write!(f, "checkpoint version {got} unsupported (expected {expected})")
            }
            Error::CheckpointCorrupt(msg) => write!(f, "corrupt checkpoint: {msg}"),
            Error::CheckpointDtype { expected, got } => {
                write!(f, "checkpoint stores {got} tensors, run expects {expected}")
            }
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
