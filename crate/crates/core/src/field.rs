//! Grid geometry, field samples, and discretized inner products.
//!
//! Fields live on a regular voxel grid over `[0,1]^d`; each voxel is
//! represented by its midpoint and carries quadrature weight `1/D`, so
//! `<a, b> = D^{-1} sum_i a_i b_i` integrates over a domain of unit measure.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DMatrixView};

use crate::error::{invalid, Result};
#[allow(unused_imports)]
use num_traits::Float;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Grid {
    sizes: Vec<usize>,
    total: usize,
}

impl Grid {
    /// Builds a grid from the dimension and per-axis voxel counts.
    pub fn new(d: usize, sizes: &[usize]) -> Result<Self> {
        if d == 0 {
            return Err(invalid!("grid dimension must be positive"));
        }
        if sizes.len() != d {
            return Err(invalid!("grid has d = {d} but {} sizes", sizes.len()));
        }
        if let Some(pos) = sizes.iter().position(|&k| k == 0) {
            return Err(invalid!("grid size along axis {pos} is zero"));
        }
        let total = sizes
            .iter()
            .try_fold(1usize, |acc, &k| acc.checked_mul(k))
            .ok_or_else(|| invalid!("grid size overflows usize"))?;
        Ok(Self {
            sizes: sizes.to_vec(),
            total,
        })
    }

    /// `K x K x ... x K` grid in `d` dimensions.
    pub fn cube(d: usize, k: usize) -> Result<Self> {
        Self::new(d, &vec![k; d])
    }

    pub fn dim(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Number of voxels `D`.
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// Voxel midpoint of flat index `i` (row-major, last axis fastest).
    pub fn coordinate(&self, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.write_coordinate(i, &mut out);
        out
    }

    fn write_coordinate(&self, mut i: usize, out: &mut [f64]) {
        for axis in (0..self.dim()).rev() {
            let k = self.sizes[axis];
            let j = i % k;
            i /= k;
            out[axis] = (j as f64 + 0.5) / k as f64;
        }
    }

    /// All midpoints as a `D x d` matrix.
    pub fn coordinates(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut buf = vec![0.0; d];
        let mut m = DMatrix::zeros(self.total, d);
        for i in 0..self.total {
            self.write_coordinate(i, &mut buf);
            for (a, &x) in buf.iter().enumerate() {
                m[(i, a)] = x;
            }
        }
        m
    }

    /// Flat index of the voxel containing `point`; coordinates outside
    /// `[0,1]` are clamped onto the boundary voxel.
    pub fn voxel_of(&self, point: &[f64]) -> usize {
        let mut idx = 0;
        for (axis, &k) in self.sizes.iter().enumerate() {
            idx = idx * k + axis_cell(point[axis], k);
        }
        idx
    }
}

pub(crate) fn axis_cell(x: f64, k: usize) -> usize {
    let j = (x * k as f64).floor();
    if j < 0.0 || j.is_nan() {
        0
    } else {
        (j as usize).min(k - 1)
    }
}

/// `N x D` matrix of discretized fields, one row per sample, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldMatrix {
    grid: Grid,
    n: usize,
    values: Vec<f64>,
}

impl FieldMatrix {
    pub fn new(grid: Grid, n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * grid.len() {
            return Err(invalid!(
                "field matrix needs {} x {} = {} values, got {}",
                n,
                grid.len(),
                n * grid.len(),
                values.len()
            ));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid!(
                "non-finite field value at row {}, column {}",
                pos / grid.len(),
                pos % grid.len()
            ));
        }
        Ok(Self { grid, n, values })
    }

    /// From an `N x D` matrix.
    pub fn from_matrix(grid: Grid, m: &DMatrix<f64>) -> Result<Self> {
        if m.ncols() != grid.len() {
            return Err(invalid!(
                "matrix has {} columns, grid has {}",
                m.ncols(),
                grid.len()
            ));
        }
        let values = m.transpose().as_slice().to_vec();
        Self::new(grid, m.nrows(), values)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.grid.len();
        &self.values[i * d..(i + 1) * d]
    }

    /// The data as a column-major `D x N` view, i.e. the transpose of `X`.
    pub fn transposed_view(&self) -> DMatrixView<'_, f64> {
        DMatrixView::from_slice(&self.values, self.grid.len(), self.n)
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        self.transposed_view().transpose()
    }

    /// Pointwise sample mean (length `D`).
    pub fn mean(&self) -> Vec<f64> {
        let d = self.grid.len();
        let mut mean = vec![0.0; d];
        for i in 0..self.n {
            for (m, &x) in mean.iter_mut().zip(self.row(i)) {
                *m += x;
            }
        }
        if self.n > 0 {
            let inv = 1.0 / self.n as f64;
            mean.iter_mut().for_each(|m| *m *= inv);
        }
        mean
    }

    /// Copy with the sample mean subtracted from every row.
    pub fn centered(&self) -> Self {
        let mean = self.mean();
        let d = self.grid.len();
        let mut values = self.values.clone();
        for row in values.chunks_mut(d) {
            for (x, m) in row.iter_mut().zip(&mean) {
                *x -= m;
            }
        }
        Self {
            grid: self.grid.clone(),
            n: self.n,
            values,
        }
    }

    /// Rows selected by `indices`, in that order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut values = Vec::with_capacity(indices.len() * self.grid.len());
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Self {
            grid: self.grid.clone(),
            n: indices.len(),
            values,
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            grid: self.grid.clone(),
            n: self.n,
            values: self.values.iter().map(|x| x * factor).collect(),
        }
    }
}

/// Matrix of pairwise field inner products.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub values: DMatrix<f64>,
}

impl GramMatrix {
    pub fn sum_of_squares(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum()
    }

    pub fn mean(&self) -> f64 {
        self.values.mean()
    }
}

/// `D^{-1} sum_i a_i b_i`.
pub fn inner_product(a: &[f64], b: &[f64], grid: &Grid) -> Result<f64> {
    if a.len() != grid.len() || b.len() != grid.len() {
        return Err(invalid!(
            "inner product of lengths {} and {} on a grid of {} points",
            a.len(),
            b.len(),
            grid.len()
        ));
    }
    let s: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(s / grid.len() as f64)
}

/// Entry `(n, m)` is `<A_n, B_m>`.
pub fn cross_gram(a: &FieldMatrix, b: &FieldMatrix) -> Result<GramMatrix> {
    if a.grid != b.grid {
        return Err(invalid!("cross gram of fields on different grids"));
    }
    let mut values = a.transposed_view().tr_mul(&b.transposed_view());
    values /= a.grid.len() as f64;
    Ok(GramMatrix { values })
}
