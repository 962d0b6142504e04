//! Dense feature maps, matrices and channel vectors.

use crate::error::{ensure, CeError, Result};
use crate::rng::Rng;

/// Length-C vector of per-channel values (gamma, beta, variances, gates).
pub type ChannelVector = Vec<f64>;

/// Rank-4 activation tensor laid out row-major as (n, c, i, j).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(dims: (usize, usize, usize, usize), data: Vec<f64>) -> Result<Self> {
        let (n, c, h, w) = dims;
        ensure!(
            n >= 1 && c >= 1 && h >= 1 && w >= 1,
            Shape,
            "all feature map dims must be >= 1, got {:?}",
            dims
        );
        ensure!(
            data.len() == n * c * h * w,
            Shape,
            "data length {} != {}x{}x{}x{}",
            data.len(),
            n,
            c,
            h,
            w
        );
        ensure!(
            data.iter().all(|v| v.is_finite()),
            Contract,
            "feature map contains non-finite entries"
        );
        Ok(FeatureMap { n, c, h, w, data })
    }

    pub fn zeros(dims: (usize, usize, usize, usize)) -> Self {
        let (n, c, h, w) = dims;
        assert!(
            n >= 1 && c >= 1 && h >= 1 && w >= 1,
            "zero-sized feature map"
        );
        FeatureMap {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_fn(
        dims: (usize, usize, usize, usize),
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Self {
        let mut out = FeatureMap::zeros(dims);
        let (n, c, h, w) = dims;
        let mut k = 0;
        for a in 0..n {
            for b in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        out.data[k] = f(a, b, i, j);
                        k += 1;
                    }
                }
            }
        }
        out
    }

    pub fn random_normal(dims: (usize, usize, usize, usize), rng: &mut Rng) -> Self {
        FeatureMap::from_fn(dims, |_, _, _, _| rng.normal())
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn batch(&self) -> usize {
        self.n
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    /// Number of spatial locations H*W.
    pub fn spatial(&self) -> usize {
        self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, i: usize, j: usize) -> usize {
        ((n * self.c + c) * self.h + i) * self.w + j
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, i: usize, j: usize) -> f64 {
        self.data[self.index(n, c, i, j)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, i: usize, j: usize, v: f64) {
        let k = self.index(n, c, i, j);
        self.data[k] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Contiguous H*W plane of sample `n`, channel `c`.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.spatial();
        let start = (n * self.c + c) * p;
        &self.data[start..start + p]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let p = self.spatial();
        let start = (n * self.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// All channels of sample `n` as one contiguous C*H*W block.
    pub fn sample(&self, n: usize) -> &[f64] {
        let stride = self.c * self.spatial();
        &self.data[n * stride..(n + 1) * stride]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> FeatureMap {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, k: f64) -> FeatureMap {
        self.map(|v| v * k)
    }

    pub fn zip_with(&self, other: &FeatureMap, f: impl Fn(f64, f64) -> f64) -> Result<FeatureMap> {
        ensure!(
            self.dims() == other.dims(),
            Shape,
            "feature map dims {:?} vs {:?}",
            self.dims(),
            other.dims()
        );
        Ok(self.with_data(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn max_abs_diff(&self, other: &FeatureMap) -> f64 {
        assert_eq!(self.dims(), other.dims());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Same shape, new contents.
    pub fn with_data(&self, data: Vec<f64>) -> FeatureMap {
        assert_eq!(data.len(), self.data.len());
        FeatureMap {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data,
        }
    }

    /// Channel-major C x (N*H*W) flattening (sample-major within a row).
    pub fn channel_rows(&self) -> Matrix {
        let p = self.spatial();
        let m = self.n * p;
        let mut out = Matrix::zeros(self.c, m);
        for n in 0..self.n {
            for c in 0..self.c {
                out.row_mut(c)[n * p..(n + 1) * p].copy_from_slice(self.plane(n, c));
            }
        }
        out
    }

    /// Gathers a subset of channels into a new feature map.
    pub fn select_channels(&self, channels: &[usize]) -> FeatureMap {
        let mut out = FeatureMap::zeros((self.n, channels.len(), self.h, self.w));
        for n in 0..self.n {
            for (k, &c) in channels.iter().enumerate() {
                out.plane_mut(n, k).copy_from_slice(self.plane(n, c));
            }
        }
        out
    }
}

/// Per-axis reductions with a fixed accumulation order.
pub mod reduce {
    use super::FeatureMap;

    /// Mean and biased variance of each channel over (N, H, W).
    pub fn channel_mean_var(x: &FeatureMap) -> (Vec<f64>, Vec<f64>) {
        let (n, c, _, _) = x.dims();
        let count = (n * x.spatial()) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for s_i in 0..n {
                s += x.plane(s_i, ch).iter().sum::<f64>();
            }
            let mu = s / count;
            let mut q = 0.0;
            for s_i in 0..n {
                q += x
                    .plane(s_i, ch)
                    .iter()
                    .map(|v| (v - mu) * (v - mu))
                    .sum::<f64>();
            }
            mean[ch] = mu;
            var[ch] = q / count;
        }
        (mean, var)
    }

    /// Mean and biased variance of each (n, c) plane over (H, W); row-major N x C.
    pub fn instance_mean_var(x: &FeatureMap) -> (Vec<f64>, Vec<f64>) {
        let (n, c, _, _) = x.dims();
        let p = x.spatial() as f64;
        let mut mean = vec![0.0; n * c];
        let mut var = vec![0.0; n * c];
        for s in 0..n {
            for ch in 0..c {
                let plane = x.plane(s, ch);
                let mu = plane.iter().sum::<f64>() / p;
                mean[s * c + ch] = mu;
                var[s * c + ch] = plane.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / p;
            }
        }
        (mean, var)
    }

    /// Mean and biased variance of each sample over (C, H, W).
    pub fn sample_mean_var(x: &FeatureMap) -> (Vec<f64>, Vec<f64>) {
        let n = x.batch();
        let mut mean = vec![0.0; n];
        let mut var = vec![0.0; n];
        for s in 0..n {
            let block = x.sample(s);
            let count = block.len() as f64;
            let mu = block.iter().sum::<f64>() / count;
            mean[s] = mu;
            var[s] = block.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / count;
        }
        (mean, var)
    }

    /// Mean and biased variance of a plain slice.
    pub fn mean_var(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let mu = v.iter().sum::<f64>() / n;
        (mu, v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n)
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// C x C covariance-like matrix; symmetric by contract.
pub type CovMatrix = Matrix;

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == rows * cols,
            Shape,
            "matrix data length {} != {}x{}",
            data.len(),
            rows,
            cols
        );
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        ensure!(rows.iter().all(|row| row.len() == c), Shape, "ragged rows");
        Ok(Matrix {
            rows: r,
            cols: c,
            data: rows.concat(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Matrix::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols))
            .map(|i| self[(i, i)])
            .collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// Standard product; each output entry accumulates over k in increasing order.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        ensure!(
            self.cols == other.rows,
            Shape,
            "matmul inner dims {}x{} * {}x{}",
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * other` for operands whose shapes are known to agree.
    pub fn mul(&self, other: &Matrix) -> Matrix {
        self.matmul(other).expect("matrix shapes agree")
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec dims");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `selfᵀ v`.
    pub fn matvec_t(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, v.len(), "matvec_t dims");
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape());
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape());
        self.zip(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape());
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }

    pub fn add_scaled_in_place(&mut self, other: &Matrix, k: f64) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
    }

    fn zip(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().iter().sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Matrix) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn asymmetry(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in i + 1..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.asymmetry() <= tol
    }

    /// Copies the square block `[start, start+len)` on both axes.
    pub fn block(&self, start: usize, len: usize) -> Matrix {
        Matrix::from_fn(len, len, |i, j| self[(start + i, start + j)])
    }

    pub fn set_block(&mut self, start: usize, block: &Matrix) {
        for i in 0..block.rows {
            for j in 0..block.cols {
                self[(start + i, start + j)] = block[(i, j)];
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Free-function form of [`Matrix::matmul`].
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

pub(crate) fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(CeError::Shape(format!(
            "{what}: length {got}, expected {want}"
        )));
    }
    Ok(())
}
