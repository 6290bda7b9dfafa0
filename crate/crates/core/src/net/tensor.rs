use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn full(rows: usize, cols: usize, v: T) -> Self {
        Self { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{} values for a {rows}x{cols} tensor", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn scalar(v: T) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| U::lit(x.as_f64())).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Self) -> Self {
        let mut out = Self::zeros(self.rows, other.cols);
        matmul_acc(&self.data, &other.data, &mut out.data, self.rows, self.cols, other.cols);
        out
    }
}

/// `c += a[n x k] * b[k x m]`.
pub(crate) fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let ci = &mut c[i * m..(i + 1) * m];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            for (cv, &bv) in ci.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c += a[n x k] * b[m x k]^T`.
pub(crate) fn matmul_bt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let bj = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in ai.iter().zip(bj) {
                s += x * y;
            }
            c[i * m + j] += s;
        }
    }
}

/// `c += a[k x n]^T * b[k x m]`.
pub(crate) fn matmul_at_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], k: usize, n: usize, m: usize) {
    for p in 0..k {
        let ap = &a[p * n..(p + 1) * n];
        let bp = &b[p * m..(p + 1) * m];
        for (i, &aip) in ap.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            for (cv, &bv) in c[i * m..(i + 1) * m].iter_mut().zip(bp) {
                *cv += aip * bv;
            }
        }
    }
}
