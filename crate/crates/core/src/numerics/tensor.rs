use std::fmt;

use super::Scalar;
use crate::error::{Error, Result};

/// Dense row-major tensor of rank 0 to 2.
///
/// Matrices follow the `features × frames` orientation throughout the crate:
/// an embedding sequence of `T` frames is a `D × T` tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.len() > 2 {
            return Err(Error::Dimension(format!(
                "rank {} tensors are not supported",
                shape.len()
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(shape.len() <= 2, "rank {} tensors are not supported", shape.len());
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    /// Builds a `rows × cols` matrix from a generator over `(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    /// Column vector from a slice.
    pub fn column(values: &[T]) -> Self {
        Self {
            shape: vec![values.len(), 1],
            data: values.to_vec(),
        }
    }

    pub fn from_f64(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        Self::from_vec(
            &[rows, cols],
            values.iter().map(|&v| T::from_f64_lossy(v)).collect(),
        )
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

    /// `(rows, cols)`, treating a vector as a single column.
    pub fn dims(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (self.shape[0], 1),
            _ => (self.shape[0], self.shape[1]),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims().0
    }

    pub fn cols(&self) -> usize {
        self.dims().1
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn col_vec(&self, c: usize) -> Vec<T> {
        (0..self.rows()).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = self.dims();
        Self::from_fn(c, r, |i, j| self.get(j, i))
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.len() > 2 {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// `self += other`, shapes must agree in element count.
    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scale_assign(&mut self, s: T) {
        for a in &mut self.data {
            *a = *a * s;
        }
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference, as f64.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().to_f64_lossy())
            .fold(0.0, f64::max)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    /// Copies columns `start..start+len`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Self {
        let (r, c) = self.dims();
        assert!(start + len <= c, "column slice out of range");
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + start + len]);
        }
        Self {
            shape: vec![r, len],
            data,
        }
    }

    /// Gathers the given columns, in order.
    pub fn select_cols(&self, idx: &[usize]) -> Self {
        let (r, c) = self.dims();
        let mut data = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            let row = &self.data[i * c..(i + 1) * c];
            data.extend(idx.iter().map(|&j| row[j]));
        }
        Self {
            shape: vec![r, idx.len()],
            data,
        }
    }
}

/// Strided view of a row-major matrix, optionally transposed.
struct View<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

fn view<T: Scalar>(t: &Tensor<T>, trans: bool) -> View<'_, T> {
    let (r, c) = t.dims();
    if trans {
        View {
            data: t.data(),
            rows: c,
            cols: r,
            rs: 1,
            cs: c as isize,
        }
    } else {
        View {
            data: t.data(),
            rows: r,
            cols: c,
            rs: c as isize,
            cs: 1,
        }
    }
}

/// Shape of `op(a) · op(b)`, or a dimension error.
pub fn matmul_shape<T: Scalar>(
    a: &Tensor<T>,
    ta: bool,
    b: &Tensor<T>,
    tb: bool,
) -> Result<(usize, usize)> {
    let va = view(a, ta);
    let vb = view(b, tb);
    if va.cols != vb.rows {
        return Err(Error::Dimension(format!(
            "matmul {}x{} by {}x{}",
            va.rows, va.cols, vb.rows, vb.cols
        )));
    }
    Ok((va.rows, vb.cols))
}

/// `out = alpha * op(a) · op(b) + beta * out`.
pub fn gemm_into<T: Scalar>(
    out: &mut Tensor<T>,
    a: &Tensor<T>,
    ta: bool,
    b: &Tensor<T>,
    tb: bool,
    alpha: T,
    beta: T,
) {
    let va = view(a, ta);
    let vb = view(b, tb);
    assert_eq!(va.cols, vb.rows, "inner dimensions differ");
    assert_eq!(out.dims(), (va.rows, vb.cols), "output shape differs");
    if va.cols == 0 {
        out.scale_assign(beta);
        return;
    }
    let n = vb.cols;
    T::gemm(
        va.rows,
        va.cols,
        n,
        alpha,
        va.data,
        va.rs,
        va.cs,
        vb.data,
        vb.rs,
        vb.cs,
        beta,
        out.data_mut(),
        n as isize,
        1,
    );
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, ta: bool, b: &Tensor<T>, tb: bool) -> Result<Tensor<T>> {
    let (m, n) = matmul_shape(a, ta, b, tb)?;
    let mut out = Tensor::zeros(&[m, n]);
    gemm_into(&mut out, a, ta, b, tb, T::one(), T::zero());
    Ok(out)
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (r, c) = match self.shape.len() {
            0 => (1, 1),
            1 => (self.shape[0], 1),
            _ => (self.shape[0], self.shape[1]),
        };
        write!(f, "Tensor{:?} [", self.shape)?;
        for i in 0..r.min(6) {
            if i > 0 {
                write!(f, "; ")?;
            }
            for j in 0..c.min(8) {
                if j > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{:.4?}", self.data[i * c + j])?;
            }
            if c > 8 {
                write!(f, ", ..")?;
            }
        }
        if r > 6 {
            write!(f, "; ..")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_with_transposes_matches_naive() {
        let a = Tensor::<f64>::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.5 - 2.0);
        let b = Tensor::<f64>::from_fn(4, 2, |i, j| (i as f64) - (j as f64) * 1.5);
        let naive = Tensor::from_fn(3, 2, |i, j| (0..4).map(|k| a.get(i, k) * b.get(k, j)).sum());
        assert_eq!(matmul(&a, false, &b, false).unwrap(), naive);
        let at = a.transpose();
        let bt = b.transpose();
        assert_eq!(matmul(&at, true, &bt, true).unwrap(), naive);
        assert!(matmul(&a, false, &a, false).is_err());
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::from_vec(&[1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn column_selection() {
        let a = Tensor::<f64>::from_fn(2, 4, |i, j| (10 * i + j) as f64);
        let s = a.select_cols(&[3, 0]);
        assert_eq!(s.data(), &[3.0, 0.0, 13.0, 10.0]);
        assert_eq!(a.slice_cols(1, 2).data(), &[1.0, 2.0, 11.0, 12.0]);
    }
}
