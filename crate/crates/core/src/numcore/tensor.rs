use crate::error::{check_dim, Error, Result};

use super::Real;

/// Channel-major 3-D tensor (`C × H × W`, row-major within a channel).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3<T = f32> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor3<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    /// Builds a tensor from raw values, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        check_dim("tensor", "value count", channels * height * width, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor values".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Unchecked construction for values produced by internal arithmetic.
    pub(crate) fn from_raw(channels: usize, height: usize, width: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
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

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_raw(
            self.channels,
            self.height,
            self.width,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn scaled(&self, alpha: T) -> Self {
        self.map(|v| v * alpha)
    }

    pub fn cast<U: Real>(&self) -> Tensor3<U> {
        Tensor3::from_raw(
            self.channels,
            self.height,
            self.width,
            self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        )
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|v| v.as_f64()).sum::<f64>() / self.data.len() as f64
    }
}

/// Convolution kernel bank, `out × in × kh × kw`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelBank<T = f32> {
    out_channels: usize,
    in_channels: usize,
    kh: usize,
    kw: usize,
    data: Vec<T>,
}

impl<T: Real> KernelBank<T> {
    pub fn zeros(out_channels: usize, in_channels: usize, kh: usize, kw: usize) -> Self {
        Self {
            out_channels,
            in_channels,
            kh,
            kw,
            data: vec![T::zero(); out_channels * in_channels * kh * kw],
        }
    }

    pub fn from_vec(out_channels: usize, in_channels: usize, kh: usize, kw: usize, data: Vec<T>) -> Result<Self> {
        check_dim(
            "kernel bank",
            "value count",
            out_channels * in_channels * kh * kw,
            data.len(),
        )?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("kernel values".into()));
        }
        Ok(Self {
            out_channels,
            in_channels,
            kh,
            kw,
            data,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernel_height(&self) -> usize {
        self.kh
    }

    pub fn kernel_width(&self) -> usize {
        self.kw
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kh, self.kw]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, o: usize, i: usize, y: usize, x: usize) -> T {
        self.data[((o * self.in_channels + i) * self.kh + y) * self.kw + x]
    }

    pub fn cast<U: Real>(&self) -> KernelBank<U> {
        KernelBank {
            out_channels: self.out_channels,
            in_channels: self.in_channels,
            kh: self.kh,
            kw: self.kw,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Row-major `f64` matrix used by the eigensolver and PCA.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_dim("matrix", "value count", rows * cols, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix values".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m.set(i, i, v);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        check_dim("matmul", "inner dimension", self.cols, other.rows)?;
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let out_row = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        check_dim("matrix subtraction", "rows", self.rows, other.rows)?;
        check_dim("matrix subtraction", "cols", self.cols, other.cols)?;
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }
}
