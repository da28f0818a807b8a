//! Dense f64 tensors in row-major order, plus the handful of BLAS-like
//! kernels the decoder networks need.

use crate::error::{Error, Result};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} wants {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Uniform(-scale, scale) initialization.
    pub fn uniform<R: Rng>(shape: &[usize], scale: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.shape.len(), 2);
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        debug_assert_eq!(self.shape.len(), 2);
        let cols = self.shape[1];
        &mut self.data[i * cols..(i + 1) * cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// out = W x for W of shape [rows, cols], x of length cols.
pub fn matvec(w: &Tensor, x: &[f64], out: &mut [f64]) {
    let (rows, cols) = (w.shape[0], w.shape[1]);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(out.len(), rows);
    for r in 0..rows {
        let wr = &w.data[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for c in 0..cols {
            acc += wr[c] * x[c];
        }
        out[r] = acc;
    }
}

/// out += W^T y for W of shape [rows, cols], y of length rows.
pub fn matvec_t_acc(w: &Tensor, y: &[f64], out: &mut [f64]) {
    let (rows, cols) = (w.shape[0], w.shape[1]);
    debug_assert_eq!(y.len(), rows);
    debug_assert_eq!(out.len(), cols);
    for r in 0..rows {
        let wr = &w.data[r * cols..(r + 1) * cols];
        let yr = y[r];
        if yr == 0.0 {
            continue;
        }
        for c in 0..cols {
            out[c] += wr[c] * yr;
        }
    }
}

/// dW += y ⊗ x (outer product) for dW of shape [rows, cols].
pub fn outer_acc(dw: &mut Tensor, y: &[f64], x: &[f64]) {
    let (rows, cols) = (dw.shape[0], dw.shape[1]);
    debug_assert_eq!(y.len(), rows);
    debug_assert_eq!(x.len(), cols);
    for r in 0..rows {
        let yr = y[r];
        if yr == 0.0 {
            continue;
        }
        let dr = &mut dw.data[r * cols..(r + 1) * cols];
        for c in 0..cols {
            dr[c] += yr * x[c];
        }
    }
}

pub fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(out.len(), x.len());
    for (o, xi) in out.iter_mut().zip(x) {
        *o += a * xi;
    }
}
