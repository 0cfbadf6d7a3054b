//! Eigendecomposition of a fitted CovNet operator through the constituent
//! Gram matrix, without discretizing the kernel.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{invalid, Error, Result};
use crate::model::{symmetrize, FittedCovariance};
use crate::rng::Stream;

pub const DEFAULT_MC_POINTS: usize = 100_000;
/// Gram eigen-directions below this fraction of the largest are dropped.
pub const GRAM_TOL: f64 = 1e-10;
/// Eigenvalues below this fraction of the largest are reported as zero.
pub const EIGEN_CLAMP: f64 = 1e-14;

const CHUNK: usize = 8192;

/// `G[r, s] ~ integral of g_r g_s` over the unit cube.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstituentGram {
    pub matrix: DMatrix<f64>,
    pub m: usize,
    pub seed: u64,
}

/// `m x d` matrix of independent uniform points on the unit cube.
pub fn uniform_points(d: usize, m: usize, stream: &mut Stream) -> DMatrix<f64> {
    let mut pts = DMatrix::zeros(m, d);
    for i in 0..m {
        for j in 0..d {
            pts[(i, j)] = stream.uniform();
        }
    }
    pts
}

/// Monte-Carlo estimate `M^{-1} Z^T Z` at `m` uniform points.
pub fn constituent_gram(model: &FittedCovariance, m: usize, seed: u64) -> Result<ConstituentGram> {
    if m == 0 {
        return Err(invalid!("need at least one Monte-Carlo point"));
    }
    let arch = model.architecture();
    let mut stream = Stream::new(seed);
    let mut acc = DMatrix::zeros(arch.r(), arch.r());
    let mut done = 0;
    while done < m {
        let take = CHUNK.min(m - done);
        let pts = uniform_points(arch.d(), take, &mut stream);
        let z = model.constituents(&pts)?;
        acc += z.tr_mul(&z);
        done += take;
    }
    Ok(ConstituentGram {
        matrix: symmetrize(acc / m as f64),
        m,
        seed,
    })
}

/// Eigenpairs of the fitted operator: `psi_i = sum_r a[i, r] g_r`.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenSystem {
    /// Descending, non-negative; one per retained direction.
    pub eigenvalues: DVector<f64>,
    /// `rank x R`; row `i` holds the coefficients of `psi_i`.
    pub coefficients: DMatrix<f64>,
    /// Number of Gram directions retained; any further eigenvalues are 0.
    pub rank: usize,
}

fn sorted_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = symmetrize(m.clone()).symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(m.nrows(), order.len(), |r, c| {
        eig.eigenvectors[(r, order[c])]
    });
    (values, vectors)
}

/// Solves `(G Lambda G) a = eta G a` by whitening with the retained
/// eigen-directions of `G`.
pub fn eigendecompose(model: &FittedCovariance, gram: &ConstituentGram) -> Result<EigenSystem> {
    let r = model.architecture().r();
    let g = &gram.matrix;
    if g.shape() != (r, r) {
        return Err(invalid!(
            "Gram matrix is {:?}, model has R = {r}",
            g.shape()
        ));
    }
    if g.iter().any(|x| !x.is_finite()) {
        return Err(invalid!("Gram matrix has non-finite entries"));
    }
    let (s, v) = sorted_eigen(g);
    let smax = s.first().copied().unwrap_or(0.0);
    if !(smax > 0.0) {
        return Err(Error::DegenerateModel(
            "constituent Gram matrix is numerically zero".into(),
        ));
    }
    let rank = s.iter().take_while(|&&x| x >= GRAM_TOL * smax).count();
    let mut half = DMatrix::zeros(r, rank);
    let mut inv_half = DMatrix::zeros(r, rank);
    for k in 0..rank {
        let root = s[k].sqrt();
        for i in 0..r {
            half[(i, k)] = v[(i, k)] * root;
            inv_half[(i, k)] = v[(i, k)] / root;
        }
    }
    let t = half.tr_mul(&(model.lambda() * &half));
    let (eta, y) = sorted_eigen(&t);
    let eta_max = eta.first().copied().unwrap_or(0.0).max(0.0);
    let eigenvalues = DVector::from_iterator(
        rank,
        eta.iter().map(|&e| {
            if e < EIGEN_CLAMP * eta_max || e < 0.0 {
                0.0
            } else {
                e
            }
        }),
    );
    let mut coefficients = (inv_half * y).transpose();
    for mut row in coefficients.row_iter_mut() {
        let lead = row
            .iter()
            .copied()
            .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            row.neg_mut();
        }
    }
    Ok(EigenSystem {
        eigenvalues,
        coefficients,
        rank,
    })
}

/// `psi_i` evaluated at each row of `points`.
pub fn eval_eigenfunction(
    model: &FittedCovariance,
    eigen: &EigenSystem,
    i: usize,
    points: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    if i >= eigen.rank {
        return Err(invalid!(
            "eigenfunction index {i} out of range (rank {})",
            eigen.rank
        ));
    }
    let z = model.constituents(points)?;
    Ok(z * eigen.coefficients.row(i).transpose())
}

/// Replaces each eigenvalue of `Lambda` by `min(eigenvalue, lambda_n)`.
pub fn threshold_lambda(model: &FittedCovariance, lambda_n: f64) -> Result<FittedCovariance> {
    if !(lambda_n > 0.0 && lambda_n.is_finite()) {
        return Err(invalid!(
            "threshold must be positive and finite, got {lambda_n}"
        ));
    }
    let eig = model.lambda().clone().symmetric_eigen();
    let capped = eig.eigenvalues.map(|e| e.min(lambda_n));
    let e = &eig.eigenvectors;
    let lambda = e * DMatrix::from_diagonal(&capped) * e.transpose();
    model.with_lambda(symmetrize(lambda))
}
