//! Dense tensors: flat row-major `f64` storage plus an optional gradient buffer.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op} requires a rank-2 tensor, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("parameter '{name}' has no gradient; run backward first")]
    MissingGrad { name: String },
    #[error("invalid tensor: {0}")]
    Invalid(String),
}

/// A dense n-dimensional array of `f64` scalars, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().any(|&e| e == 0) {
            return Err(TensorError::Invalid(format!(
                "shape extents must be >= 1, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Invalid(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Invalid("rows must be non-empty and equal-length".into()));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    /// Linear-map initialization: uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
    pub fn init_linear<R: Rng>(rng: &mut R, fan_in: usize, shape: Vec<usize>) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-bound..=bound)).collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Accumulates `delta` into the gradient buffer, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// C = A[m,k] . B[k,n], row-major. Dispatches to a blocked kernel when the
/// problem is large enough to pay for packing; tiny products use a plain
/// ikj loop which the compiler vectorizes.
pub fn matmul_raw(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    const BLOCKED_KERNEL_MIN_MACS: usize = 1 << 15;
    if m * k * n >= BLOCKED_KERNEL_MIN_MACS {
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    } else {
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
                let b_row = &b[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// out[j,i] = a[i,j] for a row-major [rows, cols] matrix.
pub fn transpose_raw(a: &[f64], out: &mut [f64], rows: usize, cols: usize) {
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
}
