//! Dense n-dimensional tensors and the reverse-mode autodiff graph built on them.

use std::fmt;
use std::sync::Arc;

pub mod graph;
pub(crate) mod kernels;

pub use graph::{Graph, ReduceKind, Var};

/// Element type for tensor storage: `f32` for training, `f64` for
/// high-precision gradient checking.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self {
        num_traits::NumCast::from(v).unwrap_or_else(|| {
            if v.is_nan() {
                Self::nan()
            } else if v > 0.0 {
                Self::infinity()
            } else {
                Self::neg_infinity()
            }
        })
    }

    fn as_f64(self) -> f64 {
        num_traits::NumCast::from(self).unwrap_or(f64::NAN)
    }

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}

/// Errors raised by tensor construction and graph operations.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Binary op applied to incompatible shapes.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// Buffer length does not match the product of the extents.
    DataLength { expected: usize, got: usize },
    /// Shape violates an operation's structural requirements.
    InvalidShape { op: &'static str, detail: String },
    /// Axis index out of range for the tensor's rank.
    InvalidAxis { axis: usize, rank: usize },
    /// Argument outside its legal range.
    InvalidArg { arg: &'static str, detail: String },
    /// An operation produced NaN or Inf.
    NonFinite { op: String, stage: String },
    /// A value left the range a computation is guaranteed to stay in.
    Unstable { what: String },
    /// Backward requested on a non-scalar output.
    NotScalar { shape: Vec<usize> },
    /// Backward requested on a value that does not require gradients.
    NoGrad,
    /// A graph supports exactly one backward pass.
    BackwardConsumed,
    /// Operands belong to different graphs.
    GraphMismatch,
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch {left:?} vs {right:?}")
            }
            TensorError::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape product {expected}")
            }
            TensorError::InvalidShape { op, detail } => write!(f, "{op}: {detail}"),
            TensorError::InvalidAxis { axis, rank } => {
                write!(f, "axis {axis} out of range for rank {rank}")
            }
            TensorError::InvalidArg { arg, detail } => write!(f, "invalid {arg}: {detail}"),
            TensorError::NonFinite { op, stage } => {
                if stage.is_empty() {
                    write!(f, "non-finite value produced by {op}")
                } else {
                    write!(f, "non-finite value produced by {op} in {stage}")
                }
            }
            TensorError::Unstable { what } => write!(f, "numerical instability: {what}"),
            TensorError::NotScalar { shape } => {
                write!(f, "backward requires a scalar, got shape {shape:?}")
            }
            TensorError::NoGrad => write!(f, "backward requires a value with requires_grad"),
            TensorError::BackwardConsumed => write!(f, "graph already ran backward"),
            TensorError::GraphMismatch => write!(f, "operands belong to different graphs"),
        }
    }
}

impl std::error::Error for TensorError {}

pub type TensorResult<T> = Result<T, TensorError>;

/// Immutable dense array. Cloning is cheap: the buffer is shared.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> TensorResult<Self> {
        let expected = checked_numel(shape)?;
        if data.len() != expected {
            return Err(TensorError::DataLength {
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let n = checked_numel(shape).expect("zero-length dimension");
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; n]),
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: Arc::new(vec![v]),
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = checked_numel(shape).expect("zero-length dimension");
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new((0..n).map(&mut f).collect()),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable view of the buffer; copies first if the buffer is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        let buf: &mut Vec<T> = Arc::make_mut(&mut self.data);
        buf.as_mut_slice()
    }

    /// Same buffer under a different shape with equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> TensorResult<Self> {
        let expected = checked_numel(shape)?;
        if expected != self.numel() {
            return Err(TensorError::DataLength {
                expected,
                got: self.numel(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn convert<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| U::from_f64(v.as_f64())).collect()),
        }
    }

    /// Value of a scalar (single-element) tensor.
    pub fn item(&self) -> TensorResult<T> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }
}

fn checked_numel(shape: &[usize]) -> TensorResult<usize> {
    let mut n = 1usize;
    for &e in shape {
        if e == 0 {
            return Err(TensorError::InvalidShape {
                op: "tensor",
                detail: "zero-length dimension".into(),
            });
        }
        n = n.checked_mul(e).ok_or(TensorError::InvalidShape {
            op: "tensor",
            detail: "shape product overflows".into(),
        })?;
    }
    Ok(n)
}
