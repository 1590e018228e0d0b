//! Dense row-major tensors and the raw (untaped) kernels behind the tape ops.

use std::io::{Read, Write};

use super::NumericsError;

/// Element type for all tensor values. `f64` by default; the `f32` feature
/// trades the gradient-check guarantees for speed.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

/// A dense tensor of `Real` values in row-major order. Rank 0 is a scalar,
/// rank 1 a vector, rank 2 a matrix; nothing here needs more.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<Real>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<Real>) -> Result<Tensor, NumericsError> {
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(NumericsError::Validation(format!(
                "shape {shape:?} implies {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; len],
        }
    }

    pub fn scalar(v: Real) -> Tensor {
        Tensor {
            shape: vec![],
            values: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[Real] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Real] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1 && self.shape.len() <= 1
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> Real {
        assert!(self.is_scalar(), "item() on non-scalar shape {:?}", self.shape);
        self.values[0]
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on shape {:?}", self.shape);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on shape {:?}", self.shape);
        self.shape[1]
    }

    pub fn at2(&self, i: usize, j: usize) -> Real {
        self.values[i * self.cols() + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: Real) {
        let c = self.cols();
        self.values[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[Real] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Frobenius norm.
    pub fn norm(&self) -> Real {
        self.values.iter().map(|v| v * v).sum::<Real>().sqrt()
    }

    /// Serializes as rank (u32 LE), dimensions (u64 LE each), then values as
    /// 64-bit little-endian floats regardless of the compiled precision.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &self.values {
            w.write_all(&(v as f64).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> std::io::Result<Tensor> {
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let rank = u32::from_le_bytes(b4) as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut b8 = [0u8; 8];
        for _ in 0..rank {
            r.read_exact(&mut b8)?;
            shape.push(u64::from_le_bytes(b8) as usize);
        }
        let len: usize = shape.iter().product();
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut b8)?;
            values.push(f64::from_le_bytes(b8) as Real);
        }
        Ok(Tensor { shape, values })
    }
}

fn require_matrix(t: &Tensor, role: &str) -> Result<(), NumericsError> {
    if t.shape.len() != 2 {
        return Err(NumericsError::Shape(format!(
            "{role} must be rank 2, got shape {:?}",
            t.shape
        )));
    }
    Ok(())
}

/// C = A · B for (m×k)·(k×n).
pub fn matmul_nn(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    require_matrix(a, "left operand")?;
    require_matrix(b, "right operand")?;
    if a.cols() != b.rows() {
        return Err(NumericsError::Shape(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let av = a.values[i * k + l];
            let brow = &b.values[l * n..(l + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], c)
}

/// C = A · Bᵀ for (m×k)·(n×k)ᵀ.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    require_matrix(a, "left operand")?;
    require_matrix(b, "right operand")?;
    if a.cols() != b.cols() {
        return Err(NumericsError::Shape(format!(
            "matmul-nt column counts disagree: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.values[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.values[j * k..(j + 1) * k];
            let mut dot = 0.0;
            for l in 0..k {
                dot += arow[l] * brow[l];
            }
            c[i * n + j] = dot;
        }
    }
    Tensor::new(vec![m, n], c)
}

/// C = Aᵀ · B for (k×m)ᵀ·(k×n).
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    require_matrix(a, "left operand")?;
    require_matrix(b, "right operand")?;
    if a.rows() != b.rows() {
        return Err(NumericsError::Shape(format!(
            "matmul-tn row counts disagree: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    let mut c = vec![0.0; m * n];
    for l in 0..k {
        let arow = &a.values[l * m..(l + 1) * m];
        let brow = &b.values[l * n..(l + 1) * n];
        for i in 0..m {
            let av = arow[i];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], c)
}

/// Numerically stable softmax over `slice`, written into `out`.
pub(crate) fn softmax_slice(slice: &[Real], out: &mut [Real]) {
    let max = slice.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(slice) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Softmax along `axis`: every slice along that axis sums to 1. Supports
/// rank-1 tensors (axis 0) and rank-2 tensors (axis 0 = down columns,
/// axis 1 = along rows).
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor, NumericsError> {
    match (x.shape.len(), axis) {
        (1, 0) => {
            let mut out = vec![0.0; x.values.len()];
            softmax_slice(&x.values, &mut out);
            Tensor::new(x.shape.clone(), out)
        }
        (2, 1) => {
            let (m, n) = (x.rows(), x.cols());
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                softmax_slice(&x.values[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
            }
            Tensor::new(x.shape.clone(), out)
        }
        (2, 0) => {
            let (m, n) = (x.rows(), x.cols());
            let mut out = vec![0.0; m * n];
            let mut col = vec![0.0; m];
            let mut soft = vec![0.0; m];
            for j in 0..n {
                for i in 0..m {
                    col[i] = x.values[i * n + j];
                }
                softmax_slice(&col, &mut soft);
                for i in 0..m {
                    out[i * n + j] = soft[i];
                }
            }
            Tensor::new(x.shape.clone(), out)
        }
        (rank, axis) => Err(NumericsError::Validation(format!(
            "softmax axis {axis} invalid for rank-{rank} tensor"
        ))),
    }
}

/// Log-softmax over a single slice; used by decoding on raw logit rows.
pub fn log_softmax_slice(slice: &[Real]) -> Vec<Real> {
    let max = slice.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let lse = max
        + slice
            .iter()
            .map(|&x| (x - max).exp())
            .sum::<Real>()
            .ln();
    slice.iter().map(|&x| x - lse).collect()
}

pub(crate) const GELU_C: Real = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_A: Real = 0.044715;

pub(crate) fn gelu_scalar(x: Real) -> Real {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: Real) -> Real {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
