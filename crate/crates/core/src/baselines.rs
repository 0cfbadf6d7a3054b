//! Reference estimators and Monte-Carlo relative Hilbert-Schmidt error.

use alloc::vec::Vec;

use nalgebra::DMatrix;
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{invalid, Error, Result};
use crate::field::{FieldMatrix, Grid};
use crate::model::{symmetrize, FittedCovariance};
use crate::rng::Stream;
use crate::simulate::{kernel_eval, KernelSpec};

pub const DEFAULT_DENSE_CAP: usize = 4096;
pub const DEFAULT_ERROR_POINTS: usize = 100_000;

const CHUNK: usize = 8192;

/// A covariance kernel that can be evaluated at arbitrary points.
pub trait CovarianceKernel {
    fn eval(&self, u: &[f64], v: &[f64]) -> Result<f64>;

    /// `c(u_i, v_i)` for paired rows of two `M x d` matrices.
    fn eval_pairs(&self, us: &DMatrix<f64>, vs: &DMatrix<f64>) -> Result<Vec<f64>> {
        let mut u = Vec::with_capacity(us.ncols());
        let mut v = Vec::with_capacity(vs.ncols());
        (0..us.nrows())
            .map(|i| {
                u.clear();
                v.clear();
                u.extend(us.row(i).iter());
                v.extend(vs.row(i).iter());
                self.eval(&u, &v)
            })
            .collect()
    }
}

impl CovarianceKernel for KernelSpec {
    fn eval(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        kernel_eval(self, u, v)
    }
}

impl CovarianceKernel for FittedCovariance {
    fn eval(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        self.kernel_at(u, v)
    }

    fn eval_pairs(&self, us: &DMatrix<f64>, vs: &DMatrix<f64>) -> Result<Vec<f64>> {
        self.kernel_pairs(us, vs)
    }
}

/// The estimator that predicts no covariance at all.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ZeroKernel;

impl CovarianceKernel for ZeroKernel {
    fn eval(&self, _: &[f64], _: &[f64]) -> Result<f64> {
        Ok(0.0)
    }
}

/// Grid-level covariance values, continued to the cube voxel by voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseCovariance {
    pub grid: Grid,
    pub matrix: DMatrix<f64>,
}

impl CovarianceKernel for DenseCovariance {
    fn eval(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        check_point(&self.grid, u)?;
        check_point(&self.grid, v)?;
        Ok(self.matrix[(self.grid.voxel_of(u), self.grid.voxel_of(v))])
    }
}

fn check_point(grid: &Grid, u: &[f64]) -> Result<()> {
    if u.len() != grid.dim() {
        return Err(invalid!(
            "point has {} coordinates, grid is {}-dimensional",
            u.len(),
            grid.dim()
        ));
    }
    Ok(())
}

/// `N^{-1} X^T X` for fields that are already centered.
pub fn empirical_covariance(f: &FieldMatrix, cap: usize) -> Result<DenseCovariance> {
    let d = f.grid().len();
    if d > cap {
        return Err(Error::ResourceLimit {
            what: "dense covariance grid size",
            requested: d,
            cap,
        });
    }
    let xt = f.transposed_view();
    let matrix = symmetrize(xt * xt.transpose() / f.n() as f64);
    Ok(DenseCovariance {
        grid: f.grid().clone(),
        matrix,
    })
}

/// Kronecker-product covariance `A (x) B` on a two-dimensional grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableCovariance {
    pub grid: Grid,
    /// First-axis factor, `K_1 x K_1`.
    pub a: DMatrix<f64>,
    /// Second-axis factor, `K_2 x K_2`.
    pub b: DMatrix<f64>,
}

impl SeparableCovariance {
    pub fn matrix(&self) -> DMatrix<f64> {
        self.a.kronecker(&self.b)
    }
}

impl CovarianceKernel for SeparableCovariance {
    fn eval(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        check_point(&self.grid, u)?;
        check_point(&self.grid, v)?;
        let k2 = self.b.nrows();
        let (i, j) = (self.grid.voxel_of(u), self.grid.voxel_of(v));
        Ok(self.a[(i / k2, j / k2)] * self.b[(i % k2, j % k2)])
    }
}

/// Nearest Kronecker product in Frobenius norm, from the leading singular
/// pair of the rearranged matrix `R[(i1,j1),(i2,j2)] = C[(i1,i2),(j1,j2)]`.
pub fn best_separable_2d(c: &DenseCovariance) -> Result<SeparableCovariance> {
    if c.grid.dim() != 2 {
        return Err(Error::UnsupportedDimension(c.grid.dim()));
    }
    let (k1, k2) = (c.grid.sizes()[0], c.grid.sizes()[1]);
    let mut r = DMatrix::zeros(k1 * k1, k2 * k2);
    for i1 in 0..k1 {
        for j1 in 0..k1 {
            for i2 in 0..k2 {
                for j2 in 0..k2 {
                    r[(i1 * k1 + j1, i2 * k2 + j2)] = c.matrix[(i1 * k2 + i2, j1 * k2 + j2)];
                }
            }
        }
    }
    let svd = r.svd(true, true);
    let (k, sigma) = svd.singular_values.iter().copied().enumerate().fold(
        (0, f64::NEG_INFINITY),
        |best, (i, s)| if s > best.1 { (i, s) } else { best },
    );
    let u = svd
        .u
        .as_ref()
        .ok_or_else(|| Error::Numeric("SVD returned no left vectors".into()))?;
    let vt = svd
        .v_t
        .as_ref()
        .ok_or_else(|| Error::Numeric("SVD returned no right vectors".into()))?;
    let root = sigma.max(0.0).sqrt();
    let mut a = DMatrix::from_fn(k1, k1, |i, j| root * u[(i * k1 + j, k)]);
    let mut b = DMatrix::from_fn(k2, k2, |i, j| root * vt[(k, i * k2 + j)]);
    if a.trace() < 0.0 {
        a.neg_mut();
        b.neg_mut();
    }
    Ok(SeparableCovariance {
        grid: c.grid.clone(),
        a: symmetrize(a),
        b: symmetrize(b),
    })
}

/// `sqrt(sum (c_hat - c)^2 / sum c^2)` over `m` uniform point pairs.
pub fn relative_error_mc(
    estimate: &dyn CovarianceKernel,
    truth: &dyn CovarianceKernel,
    d: usize,
    m: usize,
    seed: u64,
) -> Result<f64> {
    let (num, den) = mc_sums(estimate, truth, d, m, seed)?;
    if den == 0.0 {
        return Err(Error::DegenerateTruth);
    }
    Ok((num / den).sqrt())
}

/// Monte-Carlo estimate of the squared Hilbert-Schmidt norm
/// `M^{-1} sum c(u_i, v_i)^2`.
pub fn hs_norm_sq_mc(kernel: &dyn CovarianceKernel, d: usize, m: usize, seed: u64) -> Result<f64> {
    let (num, _) = mc_sums(kernel, &ZeroKernel, d, m, seed)?;
    Ok(num / m as f64)
}

fn mc_sums(
    estimate: &dyn CovarianceKernel,
    truth: &dyn CovarianceKernel,
    d: usize,
    m: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if m == 0 || d == 0 {
        return Err(invalid!("need at least one point pair in dimension >= 1"));
    }
    let mut stream = Stream::new(seed);
    let (mut num, mut den) = (0.0, 0.0);
    let mut done = 0;
    while done < m {
        let take = CHUNK.min(m - done);
        let mut us = DMatrix::zeros(take, d);
        let mut vs = DMatrix::zeros(take, d);
        for i in 0..take {
            for j in 0..d {
                us[(i, j)] = stream.uniform();
            }
            for j in 0..d {
                vs[(i, j)] = stream.uniform();
            }
        }
        let est = estimate.eval_pairs(&us, &vs)?;
        let tru = truth.eval_pairs(&us, &vs)?;
        for (e, t) in est.iter().zip(&tru) {
            num += (e - t) * (e - t);
            den += t * t;
        }
        done += take;
    }
    Ok((num, den))
}
