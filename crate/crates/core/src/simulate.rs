//! Reference covariance kernels and Gaussian random field sampling.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::FRAC_1_SQRT_2;

use nalgebra::{Cholesky, DMatrix, Matrix3};

use crate::error::{invalid, Error, Result};
use crate::field::{FieldMatrix, Grid};
use crate::rng::Stream;
use crate::special::bessel_k;
#[allow(unused_imports)]
use num_traits::Float;

/// Default cap on the grid size `D` for dense kernel matrices.
pub const DEFAULT_KERNEL_CAP: usize = 20_000;

const ORTHOGONALITY_TOL: f64 = 1e-12;

/// An orthogonal `d x d` matrix applied to both kernel arguments.
#[derive(Debug, Clone, PartialEq)]
pub struct Rotation {
    matrix: DMatrix<f64>,
}

impl Rotation {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() == 0 {
            return Err(invalid!("rotation must be a non-empty square matrix"));
        }
        let defect = (matrix.transpose() * &matrix
            - DMatrix::identity(matrix.nrows(), matrix.nrows()))
        .amax();
        if defect > ORTHOGONALITY_TOL {
            return Err(invalid!(
                "rotation is not orthogonal (max |O^T O - I| = {defect:e})"
            ));
        }
        Ok(Self { matrix })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    fn apply(&self, u: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate().take(self.dim()) {
            *o = self.matrix.row(i).iter().zip(u).map(|(m, x)| m * x).sum();
        }
    }
}

/// 45 degree rotation of the plane.
pub fn rotation_2d_45() -> Rotation {
    let h = FRAC_1_SQRT_2;
    Rotation {
        matrix: DMatrix::from_row_slice(2, 2, &[h, -h, h, h]),
    }
}

/// `O_z O_y O_x`, each factor a 45 degree rotation about one axis.
pub fn rotation_3d_composed() -> Rotation {
    let h = FRAC_1_SQRT_2;
    let ox = Matrix3::new(1.0, 0.0, 0.0, 0.0, h, -h, 0.0, h, h);
    let oy = Matrix3::new(h, 0.0, h, 0.0, 1.0, 0.0, -h, 0.0, h);
    let oz = Matrix3::new(h, -h, 0.0, h, h, 0.0, 0.0, 0.0, 1.0);
    let o = oz * oy * ox;
    Rotation {
        matrix: DMatrix::from_iterator(3, 3, o.iter().copied()),
    }
}

/// Standard 45 degree rotation for `d = 2` or `d = 3`.
pub fn standard_rotation(d: usize) -> Result<Rotation> {
    match d {
        2 => Ok(rotation_2d_45()),
        3 => Ok(rotation_3d_composed()),
        _ => Err(invalid!("no standard rotation for d = {d}")),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum KernelSpec {
    BrownianSheet,
    RotatedBrownianSheet(Rotation),
    IntegratedBrownianSheet,
    RotatedIntegratedBrownianSheet(Rotation),
    Matern { nu: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(invalid!("noise sigma must be finite and >= 0, got {sigma}"));
        }
        Ok(Self { sigma, seed })
    }
}

/// Brownian motion covariance, extended to the whole line as a two-sided
/// motion (independent branches on either side of the origin).
fn brownian(s: f64, t: f64) -> f64 {
    if s >= 0.0 && t >= 0.0 {
        s.min(t)
    } else if s < 0.0 && t < 0.0 {
        (-s).min(-t)
    } else {
        0.0
    }
}

fn integrated_brownian_half(u: f64, v: f64) -> f64 {
    if u <= v {
        0.5 * u * u * (v - u / 3.0)
    } else {
        0.5 * v * v * (u - v / 3.0)
    }
}

/// Integrated Brownian motion covariance with the same two-sided extension.
fn integrated_brownian(s: f64, t: f64) -> f64 {
    if s >= 0.0 && t >= 0.0 {
        integrated_brownian_half(s, t)
    } else if s < 0.0 && t < 0.0 {
        integrated_brownian_half(-s, -t)
    } else {
        0.0
    }
}

fn product_kernel(u: &[f64], v: &[f64], k: fn(f64, f64) -> f64) -> f64 {
    u.iter().zip(v).map(|(&a, &b)| k(a, b)).product()
}

fn rotated_product(rot: &Rotation, u: &[f64], v: &[f64], k: fn(f64, f64) -> f64) -> Result<f64> {
    let d = rot.dim();
    if u.len() != d {
        return Err(invalid!(
            "rotation is {d}-dimensional, point has {} coordinates",
            u.len()
        ));
    }
    let mut ou = [0.0; 8];
    let mut ov = [0.0; 8];
    if d <= 8 {
        rot.apply(u, &mut ou[..d]);
        rot.apply(v, &mut ov[..d]);
        Ok(product_kernel(&ou[..d], &ov[..d], k))
    } else {
        let mut ou = alloc::vec![0.0; d];
        let mut ov = alloc::vec![0.0; d];
        rot.apply(u, &mut ou);
        rot.apply(v, &mut ov);
        Ok(product_kernel(&ou, &ov, k))
    }
}

/// Matern correlation at distance `r`; exactly 1 at `r = 0`.
pub fn matern(nu: f64, r: f64) -> Result<f64> {
    if !(nu > 0.0) || !nu.is_finite() {
        return Err(invalid!("matern smoothness must be positive, got {nu}"));
    }
    if r == 0.0 {
        return Ok(1.0);
    }
    let x = (2.0 * nu).sqrt() * r;
    let log_prefactor = (1.0 - nu) * core::f64::consts::LN_2 - libm::lgamma(nu) + nu * x.ln();
    Ok(log_prefactor.exp() * bessel_k(nu, x)?)
}

/// Evaluates `c(u, v)`.
pub fn kernel_eval(spec: &KernelSpec, u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() || u.is_empty() {
        return Err(invalid!(
            "kernel arguments have lengths {} and {}",
            u.len(),
            v.len()
        ));
    }
    match spec {
        KernelSpec::BrownianSheet => Ok(product_kernel(u, v, brownian)),
        KernelSpec::IntegratedBrownianSheet => Ok(product_kernel(u, v, integrated_brownian)),
        KernelSpec::RotatedBrownianSheet(rot) => rotated_product(rot, u, v, brownian),
        KernelSpec::RotatedIntegratedBrownianSheet(rot) => {
            rotated_product(rot, u, v, integrated_brownian)
        }
        KernelSpec::Matern { nu } => {
            let r2: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
            matern(*nu, r2.sqrt())
        }
    }
}

impl KernelSpec {
    /// Dimension forced by the spec (rotations fix it), if any.
    pub fn required_dim(&self) -> Option<usize> {
        match self {
            KernelSpec::RotatedBrownianSheet(r) | KernelSpec::RotatedIntegratedBrownianSheet(r) => {
                Some(r.dim())
            }
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let KernelSpec::Matern { nu } = self {
            if !(*nu > 0.0) || !nu.is_finite() {
                return Err(invalid!("matern smoothness must be positive, got {nu}"));
            }
        }
        Ok(())
    }
}

/// Dense `D x D` kernel matrix over the grid midpoints.
pub fn kernel_matrix(spec: &KernelSpec, grid: &Grid, cap: usize) -> Result<DMatrix<f64>> {
    let n = grid.len();
    if n > cap {
        return Err(Error::ResourceLimit {
            what: "kernel matrix grid size",
            requested: n,
            cap,
        });
    }
    spec.validate()?;
    if let Some(d) = spec.required_dim() {
        if d != grid.dim() {
            return Err(invalid!(
                "kernel is {d}-dimensional, grid is {}-dimensional",
                grid.dim()
            ));
        }
    }
    let coords: Vec<Vec<f64>> = (0..n).map(|i| grid.coordinate(i)).collect();
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..=j {
            let c = kernel_eval(spec, &coords[i], &coords[j])?;
            m[(i, j)] = c;
            m[(j, i)] = c;
        }
    }
    Ok(m)
}

const JITTER_START: f64 = 1e-12;
const JITTER_ESCALATIONS: u32 = 6;

/// Lower Cholesky factor of `m + jitter I`, escalating the jitter tenfold
/// from `1e-12 * trace / D` until the factorization succeeds.
pub fn jittered_cholesky(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let n = m.nrows();
    let base = JITTER_START * (m.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut jitter = base;
    for _ in 0..=JITTER_ESCALATIONS {
        let mut shifted = m.clone();
        for i in 0..n {
            shifted[(i, i)] += jitter;
        }
        if let Some(ch) = Cholesky::new(shifted) {
            return Ok((ch.unpack(), jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::CholeskyFailed {
        jitter: jitter / 10.0,
    })
}

/// Draws `n` independent zero-mean Gaussian fields with covariance `spec` on
/// `grid`, optionally adding i.i.d. `N(0, sigma^2)` measurement noise.
pub fn sample_gaussian_fields(
    spec: &KernelSpec,
    grid: &Grid,
    n: usize,
    seed: u64,
    noise: Option<&NoiseSpec>,
    cap: usize,
) -> Result<FieldMatrix> {
    let k = kernel_matrix(spec, grid, cap)?;
    let (lower, _) = jittered_cholesky(&k)?;
    let d = grid.len();
    let mut stream = Stream::new(seed);
    // column j holds the standard normal draw for row j
    let mut z = DMatrix::zeros(d, n);
    for j in 0..n {
        for i in 0..d {
            z[(i, j)] = stream.normal();
        }
    }
    // (L Z) is D x N column-major, i.e. the fields in row-major order.
    let fields = lower * z;
    let mut values = fields.as_slice().to_vec();
    if let Some(noise) = noise {
        if noise.sigma > 0.0 {
            let mut eps = Stream::new(noise.seed);
            for x in values.iter_mut() {
                *x += noise.sigma * eps.normal();
            }
        }
    }
    FieldMatrix::new(grid.clone(), n, values)
        .map_err(|e| Error::Numeric(format!("sampling produced {e}")))
}
