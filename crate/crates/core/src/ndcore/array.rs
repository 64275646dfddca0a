//! Dense row-major arrays.

use std::fmt;
use std::iter::Sum;

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Result};

/// Floating-point element type. 64-bit is the default everywhere; 32-bit is
/// only used by the latency harness.
pub trait Real:
    Float + Default + fmt::Debug + fmt::Display + Send + Sync + Sum + 'static
{
    const NAME: &'static str;

    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `C = alpha * A @ B + beta * C` on raw strided buffers.
    ///
    /// # Safety
    /// Every element addressed by the dimensions and strides must lie inside
    /// the corresponding allocation, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// A strided read-only matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, F> {
    pub data: &'a [F],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<F> MatRef<'_, F> {
    fn last_index(&self) -> usize {
        self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
    }
}

/// Strided matrix product `c = a @ b` (or `c += a @ b` when `accumulate`).
/// `c` is written at `c_off` with row stride `c_rs` and unit column stride.
/// Does not touch the FLOP counters.
pub(crate) fn gemm<F: Real>(
    a: MatRef<'_, F>,
    b: MatRef<'_, F>,
    c: &mut [F],
    c_off: usize,
    c_rs: usize,
    accumulate: bool,
) {
    assert_eq!(a.cols, b.rows, "gemm inner extents");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                c[c_off + i * c_rs..c_off + i * c_rs + n].fill(F::zero());
            }
        }
        return;
    }
    assert!(a.last_index() < a.data.len(), "gemm lhs out of bounds");
    assert!(b.last_index() < b.data.len(), "gemm rhs out of bounds");
    assert!(c_off + (m - 1) * c_rs + n - 1 < c.len(), "gemm output out of bounds");
    let beta = if accumulate { F::one() } else { F::zero() };
    // SAFETY: the three asserts above bound every addressed element, and `c`
    // is a distinct mutable borrow so it cannot alias the inputs.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            F::one(),
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr().add(c_off),
            c_rs as isize,
            1,
        );
    }
}

/// Dense multi-dimensional array, row-major.
#[derive(Clone, PartialEq)]
pub struct NdArray<F = f64> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> NdArray<F> {
    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err("from_vec", shape, &[data.len()]);
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { F::one() } else { F::zero() })
    }

    /// Entries drawn i.i.d. from `N(0, std²)`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            F::of(z * std)
        })
    }

    /// Entries drawn i.i.d. from `U[lo, hi)`.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| F::of(rng.random_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<F> {
        self.data
    }

    /// Extent of axis `axis`, counting negative values from the end.
    pub fn dim(&self, axis: isize) -> usize {
        let a = if axis < 0 {
            (self.shape.len() as isize + axis) as usize
        } else {
            axis as usize
        };
        self.shape[a]
    }

    pub fn get(&self, index: &[usize]) -> F {
        self.data[self.flat_index(index)]
    }

    pub fn set(&mut self, index: &[usize], value: F) {
        let i = self.flat_index(index);
        self.data[i] = value;
    }

    fn flat_index(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (&i, &n) in index.iter().zip(&self.shape) {
            assert!(i < n, "index {index:?} out of bounds for {:?}", self.shape);
            flat = flat * n + i;
        }
        flat
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return shape_err("reshape", &self.shape, shape);
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn into_shape(self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return shape_err("reshape", &self.shape, shape);
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(F, F) -> F) -> Result<Self> {
        if self.shape != other.shape {
            return shape_err(op, &self.shape, &other.shape);
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn norm(&self) -> F {
        self.data.iter().map(|&x| x * x).sum::<F>().sqrt()
    }

    pub fn max_abs(&self) -> F {
        self.data.iter().fold(F::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<G: Real>(&self) -> NdArray<G> {
        NdArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| G::of(x.as_f64())).collect(),
        }
    }

    /// Rows `[start, start + len)` along axis 0.
    pub fn slice_axis0(&self, start: usize, len: usize) -> Result<Self> {
        let n0 = *self.shape.first().unwrap_or(&0);
        if start + len > n0 {
            return shape_err("slice_axis0", &self.shape, &[start, len]);
        }
        let row: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Ok(Self {
            shape,
            data: self.data[start * row..(start + len) * row].to_vec(),
        })
    }

    /// Concatenate along axis 0.
    pub fn concat_axis0(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().expect("concat_axis0 needs at least one part");
        let tail = &first.shape[1..];
        let mut data = Vec::new();
        let mut n0 = 0;
        for p in parts {
            if &p.shape[1..] != tail {
                return shape_err("concat_axis0", &first.shape, &p.shape);
            }
            n0 += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n0;
        Ok(Self { shape, data })
    }

    /// Largest entrywise difference `|a - b|`.
    pub fn max_abs_diff(&self, other: &Self) -> Result<F> {
        if self.shape != other.shape {
            return shape_err("max_abs_diff", &self.shape, &other.shape);
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(F::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    /// `‖a − b‖ / ‖b‖`, or `‖a − b‖` when `b` is the zero array.
    pub fn rel_err(&self, reference: &Self) -> Result<f64> {
        if self.shape != reference.shape {
            return shape_err("rel_err", &self.shape, &reference.shape);
        }
        let diff: f64 = self
            .data
            .iter()
            .zip(&reference.data)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum::<f64>()
            .sqrt();
        let denom = reference.norm().as_f64();
        Ok(if denom > 0.0 { diff / denom } else { diff })
    }
}

impl<F: Real> fmt::Debug for NdArray<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "NdArray<{}>{:?} [", F::NAME, self.shape)?;
        for (i, x) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{x:.6}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(NdArray::<f64>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        let a = NdArray::<f64>::from_vec(&[2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(a.get(&[1, 2]), 5.0);
        assert_eq!(a.dim(-1), 3);
    }

    #[test]
    fn zero_extent_is_empty() {
        let a = NdArray::<f64>::zeros(&[0, 2, 4]);
        assert!(a.is_empty());
        assert_eq!(a.shape(), &[0, 2, 4]);
    }

    #[test]
    fn slice_and_concat_rows() {
        let a = NdArray::<f64>::from_fn(&[4, 2], |i| i as f64);
        let lo = a.slice_axis0(0, 1).unwrap();
        let hi = a.slice_axis0(1, 3).unwrap();
        assert_eq!(NdArray::concat_axis0(&[&lo, &hi]).unwrap(), a);
        assert!(a.slice_axis0(3, 2).is_err());
    }

    #[test]
    fn rel_err_of_zero_reference_is_absolute() {
        let z = NdArray::<f64>::zeros(&[3]);
        let a = NdArray::<f64>::full(&[3], 1.0);
        assert!((a.rel_err(&z).unwrap() - 3f64.sqrt()).abs() < 1e-15);
    }
}
