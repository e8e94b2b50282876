use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Arithmetic precision carried by every [`Matrix`].
///
/// Storage is always `f64`. Results of `P32` operations are rounded to the
/// nearest `f32` after every primitive, which reproduces single-precision
/// storage without a second code path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Precision {
    #[default]
    P32,
    P64,
}

impl Precision {
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::P32 => x as f32 as f64,
            Precision::P64 => x,
        }
    }

    /// Bytes used per scalar when this precision is serialized.
    pub fn scalar_bytes(self) -> usize {
        match self {
            Precision::P32 => 4,
            Precision::P64 => 8,
        }
    }

    /// Softmax normalization tolerance.
    pub fn sum_tolerance(self) -> f64 {
        match self {
            Precision::P32 => 1e-6,
            Precision::P64 => 1e-12,
        }
    }

    pub fn from_bits(bits: u32) -> Option<Self> {
        match bits {
            32 => Some(Precision::P32),
            64 => Some(Precision::P64),
            _ => None,
        }
    }

    pub fn bits(self) -> u32 {
        match self {
            Precision::P32 => 32,
            Precision::P64 => 64,
        }
    }
}

/// Dense row-major matrix.
///
/// The element buffer is reference counted, so clones are cheap and a
/// matrix can be shared across threads. Mutation goes through
/// [`Matrix::data_mut`], which copies on write when the buffer is shared.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    precision: Precision,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{}, {:?}) [", self.rows, self.cols, self.precision)?;
        for r in 0..self.rows.min(6) {
            if r > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{:?}", &self.row(r)[..self.cols.min(6)])?;
        }
        if self.rows > 6 {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize, precision: Precision) -> Self {
        Self {
            rows,
            cols,
            precision,
            data: Arc::new(vec![0.0; rows * cols]),
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64, precision: Precision) -> Self {
        Self::from_fn(rows, cols, precision, |_, _| value)
    }

    pub fn identity(n: usize, precision: Precision) -> Self {
        Self::from_fn(n, n, precision, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        precision: Precision,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(precision.round(f(r, c)));
            }
        }
        Self {
            rows,
            cols,
            precision,
            data: Arc::new(data),
        }
    }

    /// Builds a matrix from a row-major buffer. Values are rounded to `precision`.
    pub fn from_vec(rows: usize, cols: usize, mut data: Vec<f64>, precision: Precision) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::contract(format!(
                "buffer of length {} cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if precision == Precision::P32 {
            for x in &mut data {
                *x = precision.round(*x);
            }
        }
        Ok(Self {
            rows,
            cols,
            precision,
            data: Arc::new(data),
        })
    }

    pub fn from_rows(rows: &[&[f64]], precision: Precision) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_vec(rows.len(), cols, data, precision)
    }

    pub fn row_vector(values: &[f64], precision: Precision) -> Self {
        Self::from_vec(1, values.len(), values.to_vec(), precision).expect("length matches")
    }

    /// Gaussian entries with mean zero and the given standard deviation.
    pub fn random_normal(rows: usize, cols: usize, std: f64, rng: &mut Rng, precision: Precision) -> Self {
        Self::from_fn(rows, cols, precision, |_, _| rng.normal() * std)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn precision(&self) -> Precision {
        self.precision
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the elements; copies the buffer first if it is shared.
    ///
    /// Callers writing into a `P32` matrix are responsible for storing
    /// f32-representable values (see [`Matrix::round_in_place`]).
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn round_in_place(&mut self) {
        if self.precision == Precision::P32 {
            let p = self.precision;
            for x in self.data_mut() {
                *x = p.round(*x);
            }
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_precision(&self, precision: Precision) -> Matrix {
        if precision == self.precision {
            return self.clone();
        }
        Self::from_vec(self.rows, self.cols, self.data.to_vec(), precision).expect("same length")
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Matrix {
        let p = self.precision;
        let data = self.data.iter().map(|&x| p.round(f(x))).collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            precision: p,
            data: Arc::new(data),
        }
    }

    pub fn zip_map(&self, other: &Matrix, op: &'static str, mut f: impl FnMut(f64, f64) -> f64) -> Result<Matrix> {
        self.check_same(other, op)?;
        let p = self.precision;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| p.round(f(a, b)))
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            precision: p,
            data: Arc::new(data),
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|x| x * s)
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, self.precision, |r, c| self.get(c, r))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        self.check_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn check_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    pub(crate) fn check_same(&self, other: &Matrix, op: &'static str) -> Result<()> {
        self.check_shape(other, op)?;
        check_precision(self, other, op)
    }

    pub(crate) fn from_parts(rows: usize, cols: usize, precision: Precision, data: Vec<f64>) -> Matrix {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix {
            rows,
            cols,
            precision,
            data: Arc::new(data),
        }
    }
}

pub(crate) fn check_precision(a: &Matrix, b: &Matrix, op: &'static str) -> Result<()> {
    if a.precision != b.precision {
        return Err(Error::contract(format!(
            "{op}: precision mismatch ({:?} vs {:?})",
            a.precision, b.precision
        )));
    }
    Ok(())
}

// Raw kernels. `out` must be zeroed by the caller.

/// out[m×n] += a[m×k] · b[k×n]
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(a_row, b_row);
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · b[m×n]
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..m {
        let a_row = &a[p * k..(p + 1) * k];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorize without reassociating freely.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    check_precision(a, b, "matmul")?;
    let mut out = vec![0.0; a.rows * b.cols];
    gemm_nn(&a.data, &b.data, &mut out, a.rows, a.cols, b.cols);
    let p = a.precision;
    if p == Precision::P32 {
        out.iter_mut().for_each(|x| *x = p.round(*x));
    }
    Ok(Matrix::from_parts(a.rows, b.cols, p, out))
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &[f64], precision: Precision) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::contract("softmax of an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::contract("softmax input must be finite"));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    for x in &mut out {
        *x = precision.round(*x);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.sum_squares().sqrt()
}

/// Normalizes `v` to zero mean and unit (population) variance, then applies
/// `gain` and `bias` elementwise.
pub fn layer_norm(v: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vec<f64>> {
    if v.is_empty() || gain.len() != v.len() || bias.len() != v.len() {
        return Err(Error::Shape {
            op: "layer_norm",
            left: (1, v.len()),
            right: (1, gain.len().max(bias.len())),
        });
    }
    let (mean, inv_std) = moments(v, eps);
    Ok(v.iter()
        .zip(gain.iter().zip(bias))
        .map(|(&x, (&g, &b))| (x - mean) * inv_std * g + b)
        .collect())
}

#[inline]
pub(crate) fn moments(v: &[f64], eps: f64) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}
