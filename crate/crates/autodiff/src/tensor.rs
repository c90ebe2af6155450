use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tape::NodeRef;

/// Dimensions of a tensor. Rank 0 (scalar) through rank 4 are supported.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.len() > 4 {
            return Err(Error::BadShape {
                op: "shape",
                expected: "rank <= 4".to_string(),
                got: Shape(dims.to_vec()),
            });
        }
        Ok(Shape(dims.to_vec()))
    }

    pub fn scalar() -> Self {
        Shape(Vec::new())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// A dense row-major f64 tensor. Cheap to clone: the buffer is shared.
///
/// A tensor is either a plain value (`node == None`) or the recorded output of
/// a tape operation, in which case it remembers the tape and node that
/// produced it so gradients can flow back through it.
#[derive(Clone)]
pub struct Tensor {
    shape: Shape,
    data: Rc<[f64]>,
    pub(crate) node: Option<NodeRef>,
}

impl Tensor {
    /// Builds a tensor from raw row-major data. Fails if the element count
    /// does not match the shape or any element is non-finite.
    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(Error::BadShape {
                op: "from_vec",
                expected: format!("{} elements", data.len()),
                got: shape,
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "from_vec" });
        }
        Ok(Tensor {
            shape,
            data: data.into(),
            node: None,
        })
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::from_vec(&[], vec![v])
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        Tensor::from_vec(dims, vec![0.0; n])
    }

    pub fn full(dims: &[usize], v: f64) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        Tensor::from_vec(dims, vec![v; n])
    }

    pub(crate) fn from_parts(shape: Shape, data: Rc<[f64]>, node: Option<NodeRef>) -> Self {
        Tensor { shape, data, node }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn rank(&self) -> usize {
        self.shape.rank()
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_rc(&self) -> Rc<[f64]> {
        Rc::clone(&self.data)
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::BadShape {
                op: "item",
                expected: "exactly one element".to_string(),
                got: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    /// Element at a full multi-index.
    pub fn get(&self, index: &[usize]) -> Result<f64> {
        if index.len() != self.rank() {
            return Err(Error::BadShape {
                op: "get",
                expected: format!("rank {} index", self.rank()),
                got: Shape(index.to_vec()),
            });
        }
        let mut flat = 0usize;
        for (axis, (&i, &d)) in index.iter().zip(self.dims()).enumerate() {
            if i >= d {
                return Err(Error::IndexOutOfRange {
                    op: "get",
                    index: i,
                    size: self.dims()[axis],
                });
            }
            flat = flat * d + i;
        }
        Ok(self.data[flat])
    }

    /// Whether this tensor is the output of a recorded tape node.
    pub fn is_on_tape(&self) -> bool {
        self.node.is_some()
    }

    /// The same value with no tape history.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            node: None,
        }
    }

    /// Exact elementwise equality (shape and every bit of every element).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{}", self.shape)?;
        if self.numel() <= 8 {
            write!(f, " {:?}", &self.data[..])
        } else {
            write!(f, " [{} elements]", self.numel())
        }
    }
}
