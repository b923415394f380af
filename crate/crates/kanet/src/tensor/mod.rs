//! Dense row-major tensors and the reverse-mode tape.
//!
//! The compute dtype is `f32`; gradient-check builds instantiate the same
//! code at `f64` through the [`Scalar`] trait.

mod tape;

pub use tape::{softmax_row_inplace, Tape, VarId, COSINE_EPS, LAYERNORM_EPS, LOG_CLAMP};

use std::fmt::{Debug, Display};

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{KanetError, Result};

/// Element type tag used by the binary tensor format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(KanetError::Format(format!("unknown dtype code {other}"))),
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Floating-point element type for all tensor math.
pub trait Scalar:
    Float + num_traits::NumAssign + Debug + Display + Default + Send + Sync + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    /// Reads one element from a little-endian byte slice of exactly
    /// `DTYPE.size_bytes()` bytes. Bit-exact with `write_le`.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }
}

/// Dense row-major tensor. Immutable after construction in normal use;
/// gradients live on the tape, not here.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(KanetError::shape(
                "tensor::new",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); numel] }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    /// 1-D tensor from a vector of elements.
    pub fn from_vec(data: Vec<T>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    /// Seeded Gaussian init with the given standard deviation.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: T, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64(z) * std
            })
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert!(self.is_scalar(), "item() on non-scalar tensor");
        self.data[0]
    }

    /// Views a 1-D tensor as one row, a 2-D tensor as-is.
    pub fn as_matrix(&self) -> Result<(usize, usize)> {
        match self.shape.len() {
            1 => Ok((1, self.shape[0])),
            2 => Ok((self.shape[0], self.shape[1])),
            _ => Err(KanetError::shape(
                "as_matrix",
                format!("expected 1-D or 2-D tensor, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn row(&self, r: usize) -> &[T] {
        let (rows, cols) = self.as_matrix().expect("row() on non-matrix tensor");
        debug_assert!(r < rows);
        &self.data[r * cols..(r + 1) * cols]
    }

    /// Extracts row `r` as a 1-D tensor.
    pub fn row_tensor(&self, r: usize) -> Tensor<T> {
        Tensor::from_vec(self.row(r).to_vec())
    }

    /// Builds a 2-D tensor by stacking equal-length rows.
    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        if rows.is_empty() {
            return Err(KanetError::Argument("from_rows needs at least one row".into()));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(KanetError::shape("from_rows", "ragged rows".to_string()));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    /// Elementwise mean of a non-empty set of same-shape tensors.
    pub fn mean_of(tensors: &[&Tensor<T>]) -> Result<Self> {
        let first = tensors.first().ok_or_else(|| {
            KanetError::Argument("mean_of needs at least one tensor".into())
        })?;
        let mut acc = vec![T::zero(); first.numel()];
        for t in tensors {
            if t.shape != first.shape {
                return Err(KanetError::shape("mean_of", "mixed shapes".to_string()));
            }
            for (a, v) in acc.iter_mut().zip(t.data.iter()) {
                *a += *v;
            }
        }
        let n = T::from_f64(tensors.len() as f64);
        for a in acc.iter_mut() {
            *a /= n;
        }
        Tensor::new(first.shape.clone(), acc)
    }

    /// L2 norm of the flattened data.
    pub fn norm(&self) -> T {
        self.data.iter().fold(T::zero(), |s, &v| s + v * v).sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Little-endian raw bytes of the payload, row-major.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.numel() * T::DTYPE.size_bytes());
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }
}

/// Max relative difference between two same-length slices, with an absolute
/// floor on the denominator so near-zero pairs compare absolutely.
pub fn max_rel_diff<T: Scalar>(a: &[T], b: &[T], floor: T) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut worst = T::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        let denom = x.abs().max(y.abs()).max(floor);
        let rel = (x - y).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}
