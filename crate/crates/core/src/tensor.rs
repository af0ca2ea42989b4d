//! Dense row-major f64 tensors and a central-difference gradient oracle.
//!
//! Everything downstream builds on these two pieces: a minimal tensor with a
//! bit-reproducible `matmul`, and `finite_diff_grad`, the independent check
//! against which every analytic gradient in the crate is verified.
//!
//! Accumulations run in a fixed left-to-right order with no reassociation and
//! no internal parallelism, so identical inputs produce identical bytes.

use crate::error::{Error, Result};

/// Dense row-major tensor of f64 values with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor from a shape and data, checking length and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::Config(format!(
                "tensor extents must be positive, got {:?}",
                shape
            )));
        }
        if expected != data.len() {
            return Err(Error::Shape {
                context: "tensor construction".into(),
                left: shape,
                right: vec![data.len()],
            });
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                context: "non-finite value in tensor construction".into(),
                index: idx,
            });
        }
        Ok(Self { shape, data })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns when viewed as a matrix.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    /// Element of a rank-2 tensor.
    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        debug_assert_eq!(self.shape.len(), 2);
        &mut self.data[r * self.shape[1] + c]
    }

    /// Row slice of a rank-2 tensor.
    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        debug_assert_eq!(self.shape.len(), 2);
        let w = self.shape[1];
        &self.data[r * w..(r + 1) * w]
    }

    /// Reinterpret the same data under a new shape of equal volume.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::Shape {
                context: "reshape".into(),
                left: self.shape.clone(),
                right: shape,
            });
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    /// Squared Euclidean norm of the whole tensor, accumulated left to right.
    pub fn sq_norm(&self) -> f64 {
        let mut acc = 0.0;
        for &v in &self.data {
            acc += v * v;
        }
        acc
    }
}

/// Matrix product `a (m x k) * b (k x n)`, plain triple loop.
///
/// The inner accumulation runs over `t` left to right for every output cell,
/// which makes the result bit-reproducible across calls and across runs.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(Error::Shape {
            context: "matmul expects rank-2 tensors".into(),
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::Shape {
            context: "matmul inner dimensions".into(),
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let mut acc = 0.0;
            for (t, &av) in arow.iter().enumerate() {
                acc += av * b.data[t * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Matrix-vector product `a (m x k) * x (k)` with the same fixed accumulation
/// order as [`matmul`].
pub fn matvec(a: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    if k != x.len() {
        return Err(Error::Shape {
            context: "matvec inner dimensions".into(),
            left: a.shape().to_vec(),
            right: vec![x.len()],
        });
    }
    let mut out = vec![0.0; m];
    for i in 0..m {
        let mut acc = 0.0;
        for t in 0..k {
            acc += a.data[i * k + t] * x[t];
        }
        out[i] = acc;
    }
    Ok(out)
}

/// Transposed matrix-vector product `a^T (k x m)^T * h (m)` -> length-k vector.
pub fn matvec_t(a: &Tensor, h: &[f64]) -> Result<Vec<f64>> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    if m != h.len() {
        return Err(Error::Shape {
            context: "matvec_t outer dimensions".into(),
            left: a.shape().to_vec(),
            right: vec![h.len()],
        });
    }
    let mut out = vec![0.0; k];
    for j in 0..k {
        let mut acc = 0.0;
        for i in 0..m {
            acc += a.data[i * k + j] * h[i];
        }
        out[j] = acc;
    }
    Ok(out)
}

/// Central-difference gradient of `f` at `p`: one coordinate at a time,
/// `g[i] = (f(p + h e_i) - f(p - h e_i)) / (2h)`.
///
/// This is the verification oracle for every analytic gradient in the crate;
/// it must stay independent of the code paths it checks.
pub fn finite_diff_grad<F>(f: F, p: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::Config(format!(
            "finite difference step must be positive, got {h}"
        )));
    }
    let mut work = p.data().to_vec();
    let mut grad = vec![0.0; work.len()];
    for i in 0..work.len() {
        let orig = work[i];
        work[i] = orig + h;
        let fp = f(&work)?;
        work[i] = orig - h;
        let fm = f(&work)?;
        work[i] = orig;
        let g = (fp - fm) / (2.0 * h);
        if !g.is_finite() {
            return Err(Error::Numeric {
                context: "non-finite finite-difference evaluation".into(),
                index: i,
            });
        }
        grad[i] = g;
    }
    Ok(Tensor {
        shape: p.shape().to_vec(),
        data: grad,
    })
}
