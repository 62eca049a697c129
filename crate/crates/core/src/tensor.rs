//! Dense row-major matrices.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// A dense row-major `rows × cols` matrix. Scalars are `1 × 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length does not match shape");
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Tensor { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![value] }
    }

    pub fn column(data: Vec<T>) -> Self {
        Tensor { rows: data.len(), cols: 1, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single entry of a `1 × 1` tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.shape(), (1, 1), "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape(), other.shape(), "elementwise shape mismatch");
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul(a: &Self, b: &Self, ta: bool, tb: bool) -> Self {
        let (m, k, rsa, csa) =
            if ta { (a.cols, a.rows, 1, a.cols as isize) } else { (a.rows, a.cols, a.cols as isize, 1) };
        let (k2, n, rsb, csb) =
            if tb { (b.cols, b.rows, 1, b.cols as isize) } else { (b.rows, b.cols, b.cols as isize, 1) };
        assert_eq!(k, k2, "matmul inner dimension mismatch: {:?} x {:?}", a.shape(), b.shape());
        let mut out = Self::zeros(m, n);
        if m == 0 || n == 0 || k == 0 {
            return out;
        }
        // SAFETY: strides describe the row-major buffers above, `out` is fresh.
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                a.data.as_ptr(),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                T::zero(),
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        out
    }

    /// `self (r×c) + row (1×c)` broadcast over rows.
    pub fn add_row(&self, row: &Self) -> Self {
        assert_eq!(row.rows, 1);
        assert_eq!(row.cols, self.cols, "row broadcast width mismatch");
        let mut out = self.clone();
        for chunk in out.data.chunks_mut(self.cols.max(1)) {
            for (x, &b) in chunk.iter_mut().zip(&row.data) {
                *x += b;
            }
        }
        out
    }

    pub fn scale_rows(&self, factors: &[T]) -> Self {
        assert_eq!(factors.len(), self.rows, "row factor count mismatch");
        let mut out = self.clone();
        if self.cols == 0 {
            return out;
        }
        for (chunk, &f) in out.data.chunks_mut(self.cols).zip(factors) {
            for x in chunk {
                *x *= f;
            }
        }
        out
    }

    /// Column sums as a `1 × c` row.
    pub fn sum_rows(&self) -> Self {
        let mut out = Self::zeros(1, self.cols);
        if self.cols == 0 {
            return out;
        }
        for chunk in self.data.chunks(self.cols) {
            for (o, &x) in out.data.iter_mut().zip(chunk) {
                *o += x;
            }
        }
        out
    }

    pub fn broadcast_rows(&self, rows: usize) -> Self {
        assert_eq!(self.rows, 1);
        let mut data = Vec::with_capacity(rows * self.cols);
        for _ in 0..rows {
            data.extend_from_slice(&self.data);
        }
        Tensor { rows, cols: self.cols, data }
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x)
    }

    pub fn gather_rows(&self, index: &[usize]) -> Self {
        let mut data = Vec::with_capacity(index.len() * self.cols);
        for &i in index {
            data.extend_from_slice(self.row(i));
        }
        Tensor { rows: index.len(), cols: self.cols, data }
    }

    /// `out[index[i]] += self[i]` into a fresh `out_rows × c` tensor.
    pub fn scatter_add_rows(&self, index: &[usize], out_rows: usize) -> Self {
        assert_eq!(index.len(), self.rows, "scatter index length mismatch");
        let mut out = Self::zeros(out_rows, self.cols);
        let c = self.cols;
        for (i, &target) in index.iter().enumerate() {
            let src = &self.data[i * c..(i + 1) * c];
            let dst = &mut out.data[target * c..(target + 1) * c];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        out
    }

    pub fn concat_cols(parts: &[&Self]) -> Self {
        let rows = parts.first().map_or(0, |p| p.rows);
        assert!(parts.iter().all(|p| p.rows == rows), "concat row mismatch");
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Tensor { rows, cols, data }
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.cols, "column slice out of range");
        let mut data = Vec::with_capacity(self.rows * len);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + len]);
        }
        Tensor { rows: self.rows, cols: len, data }
    }

    /// Embeds `self` at column `start` of a zero `rows × total` tensor.
    pub fn pad_cols(&self, start: usize, total: usize) -> Self {
        assert!(start + self.cols <= total, "column pad out of range");
        let mut out = Self::zeros(self.rows, total);
        for r in 0..self.rows {
            out.data[r * total + start..r * total + start + self.cols].copy_from_slice(self.row(r));
        }
        out
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let mut out = Tensor::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    fn transpose(a: &Tensor<f64>) -> Tensor<f64> {
        let mut out = Tensor::zeros(a.cols(), a.rows());
        for i in 0..a.rows() {
            for j in 0..a.cols() {
                out.set(j, i, a.get(i, j));
            }
        }
        out
    }

    #[test]
    fn matmul_transpose_flags() {
        let a = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::from_vec(3, 2, vec![0.5, -1.0, 2.0, 0.0, 1.5, 3.0]);
        let ab = naive(&a, &b);
        assert_eq!(Tensor::matmul(&a, &b, false, false), ab);
        assert_eq!(Tensor::matmul(&transpose(&a), &b, true, false), ab);
        assert_eq!(Tensor::matmul(&a, &transpose(&b), false, true), ab);
        assert_eq!(Tensor::matmul(&transpose(&a), &transpose(&b), true, true), ab);
    }

    #[test]
    fn gather_scatter_are_adjoint() {
        let x = Tensor::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let idx = [2, 0, 2, 1];
        let g = x.gather_rows(&idx);
        assert_eq!(g.row(0), &[5.0, 6.0]);
        let s = g.scatter_add_rows(&idx, 3);
        assert_eq!(s.row(2), &[10.0, 12.0]);
        assert_eq!(s.row(0), &[1.0, 2.0]);
    }

    #[test]
    fn concat_slice_pad() {
        let a = Tensor::from_vec(2, 1, vec![1.0, 2.0]);
        let b = Tensor::from_vec(2, 2, vec![3.0, 4.0, 5.0, 6.0]);
        let c = Tensor::concat_cols(&[&a, &b]);
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        assert_eq!(c.slice_cols(1, 2), b);
        assert_eq!(b.pad_cols(1, 3).data(), &[0.0, 3.0, 4.0, 0.0, 5.0, 6.0]);
    }
}
