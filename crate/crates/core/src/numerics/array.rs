//! Dense row-major `f64` arrays and the forward kernels shared by the tape.

use serde::{Deserialize, Serialize};

use super::NumericError;

/// Additive bias applied to masked attention scores before the softmax.
pub const MASK_BIAS: f64 = -1e9;

/// Variance floor used by [`Array::layernorm`].
pub const LAYERNORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawArray")]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawArray> for Array {
    type Error = NumericError;

    fn try_from(raw: RawArray) -> Result<Self, Self::Error> {
        Array::new(raw.shape, raw.data)
    }
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericError::InvalidShape {
                op: "array",
                reason: format!(
                    "shape {:?} needs {} elements, got {}",
                    shape,
                    expected,
                    data.len()
                ),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a 2-D array from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut out = Self::zeros(&[n, n]);
        for i in 0..n {
            out.data[i * n + i] = 1.0;
        }
        out
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Length of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of vectors along the last axis.
    pub fn rows(&self) -> usize {
        let d = self.last_dim();
        if d == 0 {
            0
        } else {
            self.data.len() / d
        }
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &n)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < n, "index {ix} out of bounds on axis {i} of length {n}");
            off = off * n + ix;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self, NumericError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(NumericError::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn check_finite(&self, op: &'static str) -> Result<(), NumericError> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(NumericError::NonFinite { op })
        }
    }

    /// Standard matrix product of two 2-D arrays.
    pub fn matmul(&self, rhs: &Self) -> Result<Self, NumericError> {
        if self.ndim() != 2 || rhs.ndim() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(NumericError::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.data,
            (k, 1),
            &rhs.data,
            (n, 1),
            &mut out,
            false,
        );
        let out = Self::new(vec![m, n], out)?;
        out.check_finite("matmul")?;
        Ok(out)
    }

    /// Softmax along the last axis. Masked entries (`false`) receive exactly zero.
    pub fn softmax(&self, mask: Option<&[bool]>) -> Result<Self, NumericError> {
        if let Some(m) = mask {
            if m.len() != self.len() {
                return Err(NumericError::Shape {
                    op: "softmax",
                    lhs: self.shape.clone(),
                    rhs: vec![m.len()],
                });
            }
        }
        let n = self.last_dim();
        let mut out = self.data.clone();
        for (r, row) in out.chunks_mut(n.max(1)).enumerate() {
            let keep = |j: usize| mask.map_or(true, |m| m[r * n + j]);
            if !(0..n).any(keep) {
                return Err(NumericError::DegenerateSoftmax { row: r });
            }
            softmax_row(row, keep);
        }
        let out = Self::new(self.shape.clone(), out)?;
        out.check_finite("softmax")?;
        Ok(out)
    }

    /// Layer normalisation over the last axis followed by the affine `gain`, `bias`.
    pub fn layernorm(&self, gain: &Self, bias: &Self) -> Result<Self, NumericError> {
        let d = self.last_dim();
        if d == 0 || gain.len() != d || bias.len() != d {
            return Err(NumericError::Shape {
                op: "layernorm",
                lhs: self.shape.clone(),
                rhs: gain.shape.clone(),
            });
        }
        let mut out = self.data.clone();
        for row in out.chunks_mut(d) {
            let (mean, rstd) = moments(row);
            for (j, x) in row.iter_mut().enumerate() {
                *x = (*x - mean) * rstd * gain.data[j] + bias.data[j];
            }
        }
        let out = Self::new(self.shape.clone(), out)?;
        out.check_finite("layernorm")?;
        Ok(out)
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self, NumericError> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(NumericError::InvalidShape {
                op: "permute",
                reason: format!("{perm:?} is not a permutation of {nd} axes"),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let in_strides = strides(&self.shape);
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut out = Vec::with_capacity(self.len());
        let mut idx = vec![0usize; nd];
        for _ in 0..self.len() {
            let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
            out.push(self.data[off]);
            for ax in (0..nd).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Self::new(out_shape, out)
    }

    /// Picks `indices` along `axis` (repetition allowed).
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Self, NumericError> {
        if axis >= self.ndim() || indices.iter().any(|&i| i >= self.shape[axis]) {
            return Err(NumericError::InvalidShape {
                op: "index_select",
                reason: format!("axis {axis} indices out of range for shape {:?}", self.shape),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let n = self.shape[axis];
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let start = (o * n + i) * inner;
                out.extend_from_slice(&self.data[start..start + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = indices.len();
        Self::new(shape, out)
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self, NumericError> {
        let first = parts.first().ok_or(NumericError::InvalidShape {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        for p in parts {
            let ok = p.ndim() == first.ndim()
                && axis < p.ndim()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(NumericError::Shape {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                out.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Self::new(shape, out)
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Mean and reciprocal standard deviation of one vector.
pub(crate) fn moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYERNORM_EPS).sqrt())
}

/// In-place max-stabilised softmax of one row restricted to `keep`.
pub(crate) fn softmax_row(row: &mut [f64], keep: impl Fn(usize) -> bool) {
    let max = row
        .iter()
        .enumerate()
        .filter(|(j, _)| keep(*j))
        .map(|(_, &x)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (j, x) in row.iter_mut().enumerate() {
        if keep(j) {
            *x = (*x - max).exp();
            total += *x;
        } else {
            *x = 0.0;
        }
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// `c = a * b` (or `c += a * b` when `accumulate`) for row-major buffers with
/// explicit (row, column) strides on the operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k > 0 {
        assert!(a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
        assert!(b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every offset the kernel reads or writes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
