//! Dense row-major tensors and the forward kernels shared by the model and
//! the losses.
//!
//! Every kernel validates shapes and refuses to hand back non-finite values:
//! a NaN or infinity is reported as [`TensorError::NonFinite`] naming the
//! kernel that produced it.

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, grad_check_sampled, value_and_grad};
pub use tape::{DivergenceKind, Gradients, Tape, Var};

use std::fmt::{Debug, Display};
use std::iter::Sum;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of range for size {size}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("{op}: mask selects no positions")]
    EmptyMask { op: &'static str },
    #[error("expected a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Storage precision of a tensor payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Element type of a [`Tensor`]: implemented for `f32` (training and
/// evaluation) and `f64` (gradient checking).
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    /// `c = a · b + beta · c` for strided operands.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );

    fn to_bits_u64(self) -> u64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn of(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("f64 converts to every Float")
    }

    #[inline]
    fn f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("Float converts to f64")
    }
}

impl Float for f32 {
    const DTYPE: DType = DType::F32;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        (rsa, csa): (isize, isize),
        b: &[f32],
        (rsb, csb): (isize, isize),
        beta: f32,
        c: &mut [f32],
    ) {
        debug_assert!(c.len() >= m * n);
        // SAFETY: callers size `a`, `b` and `c` for the given dims and strides.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn to_bits_u64(self) -> u64 {
        self.to_bits() as u64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Float for f64 {
    const DTYPE: DType = DType::F64;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        (rsa, csa): (isize, isize),
        b: &[f64],
        (rsb, csb): (isize, isize),
        beta: f64,
        c: &mut [f64],
    ) {
        debug_assert!(c.len() >= m * n);
        // SAFETY: callers size `a`, `b` and `c` for the given dims and strides.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn to_bits_u64(self) -> u64 {
        self.to_bits()
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// Dense row-major tensor. `data.len()` always equals the product of `shape`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Float> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        check_shape("tensor", &shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::InvalidShape {
                op: "tensor",
                detail: format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        check_shape("tensor", shape).expect("tensor dims must be positive");
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        check_shape("tensor", shape).expect("tensor dims must be positive");
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    /// `(rows, cols)` treating every leading axis as rows.
    pub fn as_rows(&self) -> (usize, usize) {
        let cols = self.last_dim();
        (self.numel() / cols, cols)
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(TensorError::InvalidShape {
                op,
                detail: format!("expected a matrix, got shape {other:?}"),
            }),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_shape("reshape", shape)?;
        if shape.iter().product::<usize>() != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn item(&self) -> Result<F> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    pub fn cast<G: Float>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| G::of(x.f64())).collect(),
        }
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits_u64() == b.to_bits_u64())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        matmul(self, other)
    }

    pub fn softmax(&self) -> Result<Self> {
        softmax(self)
    }
}

fn check_shape(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(TensorError::InvalidShape {
            op,
            detail: format!("dims must be positive, got {shape:?}"),
        });
    }
    Ok(())
}

fn same_shape<F: Float>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

/// Matrix product of `[m, k]` and `[k, n]`.
pub fn matmul<F: Float>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![F::zero(); m * n];
    F::gemm(
        m,
        k,
        n,
        &a.data,
        (k as isize, 1),
        &b.data,
        (n as isize, 1),
        F::zero(),
        &mut out,
    );
    Tensor::new(vec![m, n], out)?.ensure_finite("matmul")
}

/// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
pub fn matmul_nt<F: Float>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = a.dims2("matmul_nt")?;
    let (n, k2) = b.dims2("matmul_nt")?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_nt",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![F::zero(); m * n];
    F::gemm(
        m,
        k,
        n,
        &a.data,
        (k as isize, 1),
        &b.data,
        (1, k as isize),
        F::zero(),
        &mut out,
    );
    Tensor::new(vec![m, n], out)?.ensure_finite("matmul_nt")
}

/// `aᵀ · b` for `a: [k, m]`, `b: [k, n]`.
pub fn matmul_tn<F: Float>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (k, m) = a.dims2("matmul_tn")?;
    let (k2, n) = b.dims2("matmul_tn")?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_tn",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![F::zero(); m * n];
    F::gemm(
        m,
        k,
        n,
        &a.data,
        (1, m as isize),
        &b.data,
        (n as isize, 1),
        F::zero(),
        &mut out,
    );
    Tensor::new(vec![m, n], out)?.ensure_finite("matmul_tn")
}

pub fn add<F: Float>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    same_shape("add", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape.clone(), data)?.ensure_finite("add")
}

pub fn mul<F: Float>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    same_shape("mul", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.shape.clone(), data)?.ensure_finite("mul")
}

/// Adds `bias` (length = last dim) to every row of `x`.
pub fn add_row<F: Float>(x: &Tensor<F>, bias: &Tensor<F>) -> Result<Tensor<F>> {
    let (_, cols) = x.as_rows();
    if bias.numel() != cols {
        return Err(TensorError::ShapeMismatch {
            op: "add_row",
            lhs: x.shape.clone(),
            rhs: bias.shape.clone(),
        });
    }
    let mut out = x.data.clone();
    for row in out.chunks_exact_mut(cols) {
        for (o, &b) in row.iter_mut().zip(&bias.data) {
            *o = *o + b;
        }
    }
    Tensor::new(x.shape.clone(), out)?.ensure_finite("add_row")
}

/// Softmax along the last axis, computed with max subtraction.
pub fn softmax<F: Float>(x: &Tensor<F>) -> Result<Tensor<F>> {
    if !x.is_finite() {
        return Err(TensorError::NonFinite { op: "softmax" });
    }
    let (_, cols) = x.as_rows();
    let mut out = x.data.clone();
    for row in out.chunks_exact_mut(cols) {
        softmax_in_place(row);
    }
    Tensor::new(x.shape.clone(), out)?.ensure_finite("softmax")
}

pub fn log_softmax<F: Float>(x: &Tensor<F>) -> Result<Tensor<F>> {
    if !x.is_finite() {
        return Err(TensorError::NonFinite { op: "log_softmax" });
    }
    let (_, cols) = x.as_rows();
    let mut out = x.data.clone();
    for row in out.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
        for v in row.iter_mut() {
            *v = *v - lse;
        }
    }
    Tensor::new(x.shape.clone(), out)?.ensure_finite("log_softmax")
}

pub(crate) fn softmax_in_place<F: Float>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Row statistics retained by [`layer_norm_stats`] for the backward pass.
pub(crate) struct LayerNormStats<F> {
    pub normalized: Vec<F>,
    pub inv_std: Vec<F>,
}

/// Per-row normalization over the last axis followed by `gamma`/`beta`.
pub fn layer_norm<F: Float>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    eps: F,
) -> Result<Tensor<F>> {
    layer_norm_stats(x, gamma, beta, eps).map(|(y, _)| y)
}

pub(crate) fn layer_norm_stats<F: Float>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    eps: F,
) -> Result<(Tensor<F>, LayerNormStats<F>)> {
    let (rows, cols) = x.as_rows();
    if gamma.numel() != cols || beta.numel() != cols {
        return Err(TensorError::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape.clone(),
            rhs: gamma.shape.clone(),
        });
    }
    let n = F::of(cols as f64);
    let mut normalized = vec![F::zero(); rows * cols];
    let mut inv_std = vec![F::zero(); rows];
    let mut out = vec![F::zero(); rows * cols];
    for r in 0..rows {
        let row = &x.data[r * cols..(r + 1) * cols];
        let mean = row.iter().copied().sum::<F>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let rstd = F::one() / (var + eps).sqrt();
        inv_std[r] = rstd;
        for c in 0..cols {
            let xhat = (row[c] - mean) * rstd;
            normalized[r * cols + c] = xhat;
            out[r * cols + c] = xhat * gamma.data[c] + beta.data[c];
        }
    }
    let y = Tensor::new(x.shape.clone(), out)?.ensure_finite("layer_norm")?;
    Ok((
        y,
        LayerNormStats {
            normalized,
            inv_std,
        },
    ))
}

const GELU_COEFF: f64 = 0.044_715;

fn sqrt_2_over_pi() -> f64 {
    (2.0 / std::f64::consts::PI).sqrt()
}

/// Tanh-approximation GELU.
pub fn gelu_scalar<F: Float>(x: F) -> F {
    let c = F::of(sqrt_2_over_pi());
    let u = c * (x + F::of(GELU_COEFF) * x * x * x);
    F::of(0.5) * x * (F::one() + u.tanh())
}

pub(crate) fn gelu_grad_scalar<F: Float>(x: F) -> F {
    let c = F::of(sqrt_2_over_pi());
    let k = F::of(GELU_COEFF);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let half = F::of(0.5);
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * k * x * x)
}

pub fn gelu<F: Float>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let data = x.data.iter().map(|&v| gelu_scalar(v)).collect();
    Tensor::new(x.shape.clone(), data)?.ensure_finite("gelu")
}
