//! CovNet architectures, parameters, and forward evaluation.
//!
//! Every architecture is expressed as a list of feed-forward sigmoid
//! networks whose outputs, concatenated, are the `R` constituents
//! `g_1..g_R`:
//!
//! * shallow: one single-layer network `R x d`;
//! * deep: `R` independent networks, each ending in a `1 x p_L` layer;
//! * deepshared: one network whose shared trunk feeds an `R x p_L` head.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Result};
use crate::field::{FieldMatrix, Grid};
use crate::rng::Stream;
#[allow(unused_imports)]
use num_traits::Float;

const SIGMOID_FLOOR: f64 = 1e-300;
const SIGMOID_CEIL: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic sigmoid, kept inside the open unit interval.
#[inline]
pub fn sigmoid(t: f64) -> f64 {
    let s = if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    };
    s.clamp(SIGMOID_FLOOR, SIGMOID_CEIL)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArchKind {
    Shallow,
    Deep,
    DeepShared,
}

impl ArchKind {
    pub fn name(self) -> &'static str {
        match self {
            ArchKind::Shallow => "shallow",
            ArchKind::Deep => "deep",
            ArchKind::DeepShared => "deepshared",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "shallow" => Some(ArchKind::Shallow),
            "deep" => Some(ArchKind::Deep),
            "deepshared" => Some(ArchKind::DeepShared),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Architecture {
    kind: ArchKind,
    r: usize,
    d: usize,
    widths: Vec<usize>,
}

impl Architecture {
    /// General constructor; `widths` are the hidden widths `p_1..p_L`
    /// (empty for shallow).
    pub fn new(kind: ArchKind, r: usize, d: usize, widths: Vec<usize>) -> Result<Self> {
        if r == 0 {
            return Err(invalid!("number of constituents R must be at least 1"));
        }
        if d == 0 {
            return Err(invalid!("input dimension d must be at least 1"));
        }
        match kind {
            ArchKind::Shallow if !widths.is_empty() => {
                return Err(invalid!("shallow architecture takes no hidden widths"));
            }
            ArchKind::Deep | ArchKind::DeepShared => {
                if widths.is_empty() {
                    return Err(invalid!("{} architecture needs depth L >= 1", kind.name()));
                }
                if widths.contains(&0) {
                    return Err(invalid!("hidden widths must be positive"));
                }
                if widths.len() < 2 {
                    log::warn!(
                        "{} architecture with L = 1 hidden layer; L >= 2 is the intended regime",
                        kind.name()
                    );
                }
            }
            _ => {}
        }
        Ok(Self { kind, r, d, widths })
    }

    pub fn shallow(r: usize, d: usize) -> Result<Self> {
        Self::new(ArchKind::Shallow, r, d, Vec::new())
    }

    /// Deep architecture with `depth` hidden layers of width `R`.
    pub fn deep(r: usize, d: usize, depth: usize) -> Result<Self> {
        Self::new(ArchKind::Deep, r, d, vec![r; depth])
    }

    /// Deepshared architecture with `depth` hidden layers of width `R`.
    pub fn deep_shared(r: usize, d: usize, depth: usize) -> Result<Self> {
        Self::new(ArchKind::DeepShared, r, d, vec![r; depth])
    }

    pub fn kind(&self) -> ArchKind {
        self.kind
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    /// Layer shapes `(out, in)` of each network, in evaluation order.
    pub fn network_shapes(&self) -> Vec<Vec<(usize, usize)>> {
        let mut trunk = Vec::with_capacity(self.widths.len() + 1);
        let mut fan_in = self.d;
        for &p in &self.widths {
            trunk.push((p, fan_in));
            fan_in = p;
        }
        match self.kind {
            ArchKind::Shallow | ArchKind::DeepShared => {
                trunk.push((self.r, fan_in));
                vec![trunk]
            }
            ArchKind::Deep => {
                trunk.push((1, fan_in));
                vec![trunk; self.r]
            }
        }
    }

    /// Number of network weights and biases (excluding `Lambda`).
    pub fn parameter_count(&self) -> usize {
        self.network_shapes()
            .iter()
            .flatten()
            .map(|&(out, inp)| (inp + 1) * out)
            .sum()
    }

    /// Network parameters plus the `R(R+1)/2` free entries of `Lambda`.
    pub fn total_parameter_count(&self) -> usize {
        self.parameter_count() + self.r * (self.r + 1) / 2
    }

    /// Short label such as `shallow(R=20)` or `deepshared(L=2,R=10)`.
    pub fn label(&self) -> alloc::string::String {
        match self.kind {
            ArchKind::Shallow => alloc::format!("shallow(R={})", self.r),
            k => alloc::format!("{}(L={},R={})", k.name(), self.depth(), self.r),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`
    pub weights: DMatrix<f64>,
    pub biases: DVector<f64>,
}

impl Layer {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weights: DMatrix::zeros(out, inp),
            biases: DVector::zeros(out),
        }
    }

    fn param_len(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    /// `sigmoid(input W^T + 1 b^T)` for an `M x in` input.
    fn forward(&self, input: &DMatrix<f64>) -> DMatrix<f64> {
        let mut a = input * self.weights.transpose();
        for (j, mut col) in a.column_iter_mut().enumerate() {
            let b = self.biases[j];
            col.iter_mut().for_each(|x| *x = sigmoid(*x + b));
        }
        a
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
}

impl Network {
    fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weights.nrows())
    }

    /// Activations of every layer; the last entry is the network output.
    pub(crate) fn forward_trace(&self, points: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let mut acts: Vec<DMatrix<f64>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let next = layer.forward(acts.last().unwrap_or(points));
            acts.push(next);
        }
        acts
    }

    /// Reverse pass given the upstream gradient of the output activation.
    pub(crate) fn backward(
        &self,
        points: &DMatrix<f64>,
        acts: &[DMatrix<f64>],
        mut upstream: DMatrix<f64>,
    ) -> Network {
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let h = &acts[l];
            // dA = dH * h (1 - h)
            upstream.zip_apply(h, |g, s| *g *= s * (1.0 - s));
            let input = if l == 0 { points } else { &acts[l - 1] };
            let weights = upstream.tr_mul(input);
            let biases =
                DVector::from_iterator(upstream.ncols(), upstream.column_iter().map(|c| c.sum()));
            let next = if l > 0 {
                Some(&upstream * &self.layers[l].weights)
            } else {
                None
            };
            grads.push(Layer { weights, biases });
            if let Some(n) = next {
                upstream = n;
            }
        }
        grads.reverse();
        Network { layers: grads }
    }
}

/// All network parameters of a CovNet model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub networks: Vec<Network>,
}

impl ModelParams {
    pub fn zeros(arch: &Architecture) -> Self {
        let networks = arch
            .network_shapes()
            .into_iter()
            .map(|shapes| Network {
                layers: shapes
                    .into_iter()
                    .map(|(o, i)| Layer::zeros(o, i))
                    .collect(),
            })
            .collect();
        Self { networks }
    }

    /// Checks that every layer shape matches `arch`.
    pub fn check(&self, arch: &Architecture) -> Result<()> {
        let shapes = arch.network_shapes();
        if shapes.len() != self.networks.len() {
            return Err(invalid!(
                "expected {} networks, found {}",
                shapes.len(),
                self.networks.len()
            ));
        }
        for (k, (net, want)) in self.networks.iter().zip(&shapes).enumerate() {
            if net.layers.len() != want.len() {
                return Err(invalid!(
                    "network {k} has {} layers, expected {}",
                    net.layers.len(),
                    want.len()
                ));
            }
            for (l, (layer, &(o, i))) in net.layers.iter().zip(want).enumerate() {
                if layer.weights.shape() != (o, i) || layer.biases.len() != o {
                    return Err(invalid!(
                        "network {k} layer {l}: weights {:?} biases {}, expected ({o}, {i}) and {o}",
                        layer.weights.shape(),
                        layer.biases.len()
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn param_len(&self) -> usize {
        self.networks
            .iter()
            .flat_map(|n| &n.layers)
            .map(Layer::param_len)
            .sum()
    }

    /// Appends every parameter to `out` (weights column-major, then biases,
    /// layer by layer, network by network).
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for layer in self.networks.iter().flat_map(|n| &n.layers) {
            out.extend_from_slice(layer.weights.as_slice());
            out.extend_from_slice(layer.biases.as_slice());
        }
    }

    /// Inverse of [`write_flat`](Self::write_flat); returns the number of
    /// values consumed.
    pub fn read_flat(&mut self, src: &[f64]) -> usize {
        let mut pos = 0;
        for layer in self.networks.iter_mut().flat_map(|n| &mut n.layers) {
            let w = layer.weights.len();
            layer
                .weights
                .as_mut_slice()
                .copy_from_slice(&src[pos..pos + w]);
            pos += w;
            let b = layer.biases.len();
            layer
                .biases
                .as_mut_slice()
                .copy_from_slice(&src[pos..pos + b]);
            pos += b;
        }
        pos
    }

    pub fn is_finite(&self) -> bool {
        self.networks.iter().flat_map(|n| &n.layers).all(|l| {
            l.weights
                .iter()
                .chain(l.biases.iter())
                .all(|x| x.is_finite())
        })
    }
}

/// Per-network activations from a forward pass, kept for the reverse pass.
pub(crate) struct ForwardTrace {
    pub constituents: DMatrix<f64>,
    pub activations: Vec<Vec<DMatrix<f64>>>,
}

pub(crate) fn forward_with_trace(
    params: &ModelParams,
    arch: &Architecture,
    points: &DMatrix<f64>,
) -> ForwardTrace {
    let m = points.nrows();
    let mut z = DMatrix::zeros(m, arch.r());
    let mut activations = Vec::with_capacity(params.networks.len());
    let mut col = 0;
    for net in &params.networks {
        let acts = net.forward_trace(points);
        let out = acts.last().expect("networks have at least one layer");
        let w = net.output_width();
        z.columns_mut(col, w).copy_from(out);
        col += w;
        activations.push(acts);
    }
    ForwardTrace {
        constituents: z,
        activations,
    }
}

/// Gradient of a scalar w.r.t. all network parameters, given its gradient
/// w.r.t. the `M x R` constituent matrix.
pub(crate) fn backward_from_constituents(
    params: &ModelParams,
    points: &DMatrix<f64>,
    trace: &ForwardTrace,
    d_constituents: &DMatrix<f64>,
) -> ModelParams {
    let mut col = 0;
    let mut networks = Vec::with_capacity(params.networks.len());
    for (net, acts) in params.networks.iter().zip(&trace.activations) {
        let w = net.output_width();
        let upstream = d_constituents.columns(col, w).into_owned();
        col += w;
        networks.push(net.backward(points, acts, upstream));
    }
    ModelParams { networks }
}

/// Glorot-uniform weights, zero biases, and `N(0, 1/R)` coefficients.
pub fn init_params(
    arch: &Architecture,
    n: usize,
    seed: u64,
) -> Result<(ModelParams, DMatrix<f64>)> {
    if n == 0 {
        return Err(invalid!(
            "need at least one sample to initialise coefficients"
        ));
    }
    let mut stream = Stream::new(seed);
    let mut params = ModelParams::zeros(arch);
    for layer in params.networks.iter_mut().flat_map(|n| &mut n.layers) {
        let (out, inp) = layer.weights.shape();
        let a = (6.0 / (inp + out) as f64).sqrt();
        for i in 0..out {
            for j in 0..inp {
                layer.weights[(i, j)] = stream.uniform_range(-a, a);
            }
        }
    }
    let sd = (1.0 / arch.r() as f64).sqrt();
    let mut xi = DMatrix::zeros(n, arch.r());
    for i in 0..n {
        for j in 0..arch.r() {
            xi[(i, j)] = sd * stream.normal();
        }
    }
    Ok((params, xi))
}

fn check_points(arch: &Architecture, points: &DMatrix<f64>) -> Result<()> {
    if points.ncols() != arch.d() {
        return Err(invalid!(
            "points have {} columns, model expects d = {}",
            points.ncols(),
            arch.d()
        ));
    }
    if points.iter().any(|x| !x.is_finite()) {
        return Err(invalid!("non-finite evaluation point"));
    }
    Ok(())
}

/// `Z[i, r] = g_r(point_i)` for an `M x d` matrix of points.
pub fn eval_constituents(
    params: &ModelParams,
    arch: &Architecture,
    points: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    params.check(arch)?;
    check_points(arch, points)?;
    Ok(forward_with_trace(params, arch, points).constituents)
}

/// `X^NN = Xi Z^T` on the grid midpoints.
pub fn fitted_fields(
    params: &ModelParams,
    arch: &Architecture,
    xi: &DMatrix<f64>,
    grid: &Grid,
) -> Result<FieldMatrix> {
    if xi.ncols() != arch.r() {
        return Err(invalid!(
            "coefficient matrix has {} columns, R = {}",
            xi.ncols(),
            arch.r()
        ));
    }
    if grid.dim() != arch.d() {
        return Err(invalid!(
            "grid is {}-dimensional, model expects d = {}",
            grid.dim(),
            arch.d()
        ));
    }
    let z = eval_constituents(params, arch, &grid.coordinates())?;
    // Z Xi^T is D x N column-major, which is X^NN row-major.
    let values = (z * xi.transpose()).as_slice().to_vec();
    FieldMatrix::new(grid.clone(), xi.nrows(), values)
}

/// Column means of the coefficient matrix.
pub fn coefficient_means(xi: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(xi.ncols(), xi.column_iter().map(|c| c.mean()))
}

pub(crate) fn center_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    out
}

/// `Lambda = N^{-1} (Xi - 1 xibar^T)^T (Xi - 1 xibar^T)` when `center`,
/// else `N^{-1} Xi^T Xi`.
pub fn lambda_from_coefficients(xi: &DMatrix<f64>, center: bool) -> DMatrix<f64> {
    let n = xi.nrows().max(1) as f64;
    let lambda = if center {
        let c = center_columns(xi);
        c.tr_mul(&c)
    } else {
        xi.tr_mul(xi)
    };
    symmetrize(lambda / n)
}

pub(crate) fn symmetrize(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
    m
}

pub const LAMBDA_SYMMETRY_TOL: f64 = 1e-12;
pub const LAMBDA_PSD_TOL: f64 = 1e-10;

/// Checks that `lambda` is symmetric and positive semi-definite within the
/// model tolerances.
pub fn check_lambda(lambda: &DMatrix<f64>) -> Result<()> {
    if !lambda.is_square() {
        return Err(invalid!("Lambda must be square"));
    }
    if lambda.iter().any(|x| !x.is_finite()) {
        return Err(invalid!("Lambda has non-finite entries"));
    }
    let scale = lambda.amax().max(1.0);
    let asym = (lambda - lambda.transpose()).amax();
    if asym > LAMBDA_SYMMETRY_TOL * scale {
        return Err(invalid!("Lambda is not symmetric (max asymmetry {asym:e})"));
    }
    let sym = symmetrize(lambda.clone());
    let trace = sym.trace();
    let min = sym.symmetric_eigen().eigenvalues.min();
    if min < -LAMBDA_PSD_TOL * trace.abs() {
        return Err(invalid!(
            "Lambda is not positive semi-definite (smallest eigenvalue {min:e})"
        ));
    }
    Ok(())
}

/// A frozen CovNet covariance `c(u,v) = g(u)^T Lambda g(v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedCovariance {
    arch: Architecture,
    params: ModelParams,
    lambda: DMatrix<f64>,
    mean_coeffs: Option<DVector<f64>>,
}

impl FittedCovariance {
    pub fn new(
        arch: Architecture,
        params: ModelParams,
        lambda: DMatrix<f64>,
        mean_coeffs: Option<DVector<f64>>,
    ) -> Result<Self> {
        params.check(&arch)?;
        if !params.is_finite() {
            return Err(invalid!("network parameters must be finite"));
        }
        if lambda.shape() != (arch.r(), arch.r()) {
            return Err(invalid!(
                "Lambda is {:?}, expected {} x {}",
                lambda.shape(),
                arch.r(),
                arch.r()
            ));
        }
        check_lambda(&lambda)?;
        if let Some(m) = &mean_coeffs {
            if m.len() != arch.r() || m.iter().any(|x| !x.is_finite()) {
                return Err(invalid!(
                    "mean coefficients must be {} finite values",
                    arch.r()
                ));
            }
        }
        Ok(Self {
            arch,
            params,
            lambda: symmetrize(lambda),
            mean_coeffs,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn lambda(&self) -> &DMatrix<f64> {
        &self.lambda
    }

    pub fn mean_coeffs(&self) -> Option<&DVector<f64>> {
        self.mean_coeffs.as_ref()
    }

    /// Same constituents with a different `Lambda`.
    pub fn with_lambda(&self, lambda: DMatrix<f64>) -> Result<Self> {
        Self::new(
            self.arch.clone(),
            self.params.clone(),
            lambda,
            self.mean_coeffs.clone(),
        )
    }

    pub fn constituents(&self, points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_points(&self.arch, points)?;
        Ok(forward_with_trace(&self.params, &self.arch, points).constituents)
    }

    fn point_row(&self, u: &[f64]) -> Result<DMatrix<f64>> {
        if u.len() != self.arch.d() {
            return Err(invalid!(
                "point has {} coordinates, model expects d = {}",
                u.len(),
                self.arch.d()
            ));
        }
        Ok(DMatrix::from_row_slice(1, u.len(), u))
    }

    /// Quadratic form over the upper triangle so that swapping `g` and `h`
    /// gives a bit-identical result.
    fn bilinear(&self, g: &[f64], h: &[f64]) -> f64 {
        let r = g.len();
        let mut acc = 0.0;
        for i in 0..r {
            acc += self.lambda[(i, i)] * (g[i] * h[i]);
            for j in (i + 1)..r {
                acc += self.lambda[(i, j)] * (g[i] * h[j] + g[j] * h[i]);
            }
        }
        acc
    }

    /// `c(u, v)`.
    pub fn kernel_at(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        let gu = self.constituents(&self.point_row(u)?)?;
        let gv = self.constituents(&self.point_row(v)?)?;
        Ok(self.bilinear(gu.as_slice(), gv.as_slice()))
    }

    /// `c(u_i, v_i)` for paired rows of two `M x d` matrices.
    pub fn kernel_pairs(&self, us: &DMatrix<f64>, vs: &DMatrix<f64>) -> Result<Vec<f64>> {
        if us.shape() != vs.shape() {
            return Err(invalid!("paired point sets differ in shape"));
        }
        let gu = self.constituents(us)?;
        let gv = self.constituents(vs)?;
        let r = self.arch.r();
        let mut a = vec![0.0; r];
        let mut b = vec![0.0; r];
        Ok((0..us.nrows())
            .map(|i| {
                for k in 0..r {
                    a[k] = gu[(i, k)];
                    b[k] = gv[(i, k)];
                }
                self.bilinear(&a, &b)
            })
            .collect())
    }

    /// Estimated mean function at the given points, if a mean was fitted.
    pub fn mean_at(&self, points: &DMatrix<f64>) -> Result<Option<DVector<f64>>> {
        match &self.mean_coeffs {
            None => Ok(None),
            Some(m) => Ok(Some(self.constituents(points)? * m)),
        }
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;

    fn random_params(arch: &Architecture, seed: u64, scale: f64) -> ModelParams {
        let mut s = Stream::new(seed);
        let mut p = ModelParams::zeros(arch);
        let mut flat = Vec::new();
        p.write_flat(&mut flat);
        let flat: Vec<f64> = flat.iter().map(|_| scale * s.normal()).collect();
        p.read_flat(&flat);
        p
    }

    fn all_archs() -> Vec<Architecture> {
        vec![
            Architecture::shallow(3, 2).unwrap(),
            Architecture::deep(3, 2, 2).unwrap(),
            Architecture::deep_shared(3, 2, 2).unwrap(),
        ]
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let arch = Architecture::shallow(3, 2).unwrap();
        let (p1, x1) = init_params(&arch, 5, 9).unwrap();
        let (p2, x2) = init_params(&arch, 5, 9).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(x1, x2);
        assert_eq!(p1.networks.len(), 1);
        assert_eq!(p1.networks[0].layers[0].weights.shape(), (3, 2));
        assert_eq!(p1.networks[0].layers[0].biases.len(), 3);
        assert_eq!(x1.shape(), (5, 3));
        assert!(p1.networks[0].layers[0].biases.iter().all(|&b| b == 0.0));
        assert!(init_params(&arch, 0, 1).is_err());
    }

    #[test]
    fn init_coefficient_variance() {
        let arch = Architecture::shallow(4, 1).unwrap();
        let (_, xi) = init_params(&arch, 10_000, 3).unwrap();
        for col in xi.column_iter() {
            let var = col.iter().map(|x| x * x).sum::<f64>() / col.len() as f64;
            assert!((var - 0.25).abs() < 0.2 * 0.25, "{var}");
        }
    }

    #[test]
    fn architecture_validation() {
        assert!(Architecture::shallow(0, 2).is_err());
        assert!(Architecture::deep(2, 2, 0).is_err());
        assert!(Architecture::new(ArchKind::DeepShared, 2, 2, vec![3, 0]).is_err());
        assert!(Architecture::new(ArchKind::Shallow, 2, 2, vec![3]).is_err());
        assert!(Architecture::deep(2, 2, 1).is_ok());
    }

    #[test]
    fn parameter_census() {
        let (r, d) = (5, 3);
        assert_eq!(
            Architecture::shallow(r, d).unwrap().parameter_count(),
            r * (d + 1)
        );
        let widths = [4usize, 6, 2];
        let p: Vec<usize> = core::iter::once(d).chain(widths).collect();
        let shared = Architecture::new(ArchKind::DeepShared, r, d, widths.to_vec()).unwrap();
        let want_shared: usize =
            (0..3).map(|l| (p[l] + 1) * p[l + 1]).sum::<usize>() + r * (p[3] + 1);
        assert_eq!(shared.parameter_count(), want_shared);
        assert_eq!(
            shared.total_parameter_count(),
            want_shared + r * (r + 1) / 2
        );
        let deep = Architecture::new(ArchKind::Deep, r, d, widths.to_vec()).unwrap();
        let pp: Vec<usize> = p.iter().copied().chain(core::iter::once(1)).collect();
        let want_deep = r * (0..4).map(|l| (pp[l] + 1) * pp[l + 1]).sum::<usize>();
        assert_eq!(deep.parameter_count(), want_deep);
        assert_eq!(ModelParams::zeros(&deep).param_len(), want_deep);
    }

    #[test]
    fn zero_shallow_gives_half() {
        let arch = Architecture::shallow(4, 2).unwrap();
        let p = ModelParams::zeros(&arch);
        let pts = Grid::new(2, &[3, 3]).unwrap().coordinates();
        let z = eval_constituents(&p, &arch, &pts).unwrap();
        assert!(z.iter().all(|&x| x == 0.5));
    }

    #[test]
    fn zero_deepshared_matches_scalar_recursion() {
        let arch = Architecture::deep_shared(3, 2, 3).unwrap();
        let p = ModelParams::zeros(&arch);
        let mut x = 0.0f64;
        // three hidden layers and the head, each sigma(0 * ... + 0)
        for _ in 0..4 {
            x = 1.0 / (1.0 + (-0.0 * x).exp());
        }
        let z =
            eval_constituents(&p, &arch, &Grid::new(2, &[2, 2]).unwrap().coordinates()).unwrap();
        assert!(z.iter().all(|&v| (v - x).abs() < 1e-16));
    }

    #[test]
    fn deepshared_matches_scalar_recursion_oracle() {
        // width-1 chain: u1 = s(a*x + b), u2 = s(c*u1 + e), g_r = s(w_r*u2 + beta_r)
        let arch = Architecture::new(ArchKind::DeepShared, 2, 1, vec![1, 1]).unwrap();
        let mut p = ModelParams::zeros(&arch);
        let layers = &mut p.networks[0].layers;
        layers[0].weights[(0, 0)] = 0.7;
        layers[0].biases[0] = -0.2;
        layers[1].weights[(0, 0)] = 1.3;
        layers[1].biases[0] = 0.4;
        layers[2].weights[(0, 0)] = -2.0;
        layers[2].weights[(1, 0)] = 0.5;
        layers[2].biases[0] = 0.1;
        layers[2].biases[1] = -0.3;
        let s = |t: f64| 1.0 / (1.0 + (-t).exp());
        let pts = DMatrix::from_column_slice(3, 1, &[0.1, 0.5, 0.9]);
        let z = eval_constituents(&p, &arch, &pts).unwrap();
        for i in 0..3 {
            let u2 = s(1.3 * s(0.7 * pts[(i, 0)] - 0.2) + 0.4);
            assert!((z[(i, 0)] - s(-2.0 * u2 + 0.1)).abs() < 1e-15);
            assert!((z[(i, 1)] - s(0.5 * u2 - 0.3)).abs() < 1e-15);
        }
    }

    #[test]
    fn constituents_stay_in_sigmoid_range() {
        for arch in all_archs() {
            let p = random_params(&arch, 1, 50.0);
            let pts = Grid::new(2, &[6, 6]).unwrap().coordinates();
            let z = eval_constituents(&p, &arch, &pts).unwrap();
            assert!(z.iter().all(|&x| (1e-300..=1.0 - 1e-16).contains(&x)));
        }
    }

    #[test]
    fn eval_rejects_wrong_dimension() {
        let arch = Architecture::shallow(2, 2).unwrap();
        let p = ModelParams::zeros(&arch);
        assert!(eval_constituents(&p, &arch, &DMatrix::zeros(4, 3)).is_err());
    }

    #[test]
    fn fitted_fields_examples() {
        let arch = Architecture::shallow(2, 1).unwrap();
        let grid = Grid::new(1, &[4]).unwrap();
        let p = random_params(&arch, 4, 1.0);
        let z = eval_constituents(&p, &arch, &grid.coordinates()).unwrap();
        let ident = fitted_fields(&p, &arch, &DMatrix::identity(2, 2), &grid).unwrap();
        for r in 0..2 {
            for i in 0..4 {
                assert_eq!(ident.row(r)[i], z[(i, r)]);
            }
        }
        let zero = fitted_fields(&p, &arch, &DMatrix::zeros(3, 2), &grid).unwrap();
        assert!(zero.values().iter().all(|&x| x == 0.0));
        assert!(fitted_fields(&p, &arch, &DMatrix::zeros(3, 5), &grid).is_err());
    }

    #[test]
    fn fitted_fields_match_double_loop() {
        let arch = Architecture::shallow(2, 2).unwrap();
        let grid = Grid::new(2, &[2, 2]).unwrap();
        let p = random_params(&arch, 5, 1.0);
        let mut s = Stream::new(6);
        let xi = DMatrix::from_fn(3, 2, |_, _| s.normal());
        let f = fitted_fields(&p, &arch, &xi, &grid).unwrap();
        let layer = &p.networks[0].layers[0];
        for n in 0..3 {
            for i in 0..4 {
                let u = grid.coordinate(i);
                let mut want = 0.0;
                for r in 0..2 {
                    let t = layer.weights[(r, 0)] * u[0]
                        + layer.weights[(r, 1)] * u[1]
                        + layer.biases[r];
                    want += xi[(n, r)] / (1.0 + (-t).exp());
                }
                assert!((f.row(n)[i] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn lambda_examples() {
        let xi = DMatrix::from_column_slice(2, 1, &[1.0, -1.0]);
        assert_eq!(lambda_from_coefficients(&xi, true)[(0, 0)], 1.0);
        assert_eq!(
            lambda_from_coefficients(&DMatrix::zeros(4, 3), true),
            DMatrix::zeros(3, 3)
        );
        let mut s = Stream::new(8);
        let xi = DMatrix::from_fn(6, 3, |_, _| s.normal());
        for center in [true, false] {
            let l = lambda_from_coefficients(&xi, center);
            assert!(l.symmetric_eigen().eigenvalues.min() >= -1e-12);
        }
    }

    #[test]
    fn kernel_at_constant_model() {
        let arch = Architecture::shallow(1, 2).unwrap();
        let m = FittedCovariance::new(
            arch,
            ModelParams::zeros(&Architecture::shallow(1, 2).unwrap()),
            DMatrix::from_element(1, 1, 4.0),
            None,
        )
        .unwrap();
        assert_eq!(m.kernel_at(&[0.1, 0.2], &[0.9, 0.4]).unwrap(), 1.0);
    }

    fn random_model(arch: &Architecture, seed: u64) -> FittedCovariance {
        let p = random_params(arch, seed, 1.5);
        let mut s = Stream::new(seed + 100);
        let xi = DMatrix::from_fn(8, arch.r(), |_, _| s.normal());
        FittedCovariance::new(arch.clone(), p, lambda_from_coefficients(&xi, true), None).unwrap()
    }

    #[test]
    fn kernel_at_matches_double_sum_and_is_symmetric() {
        for arch in all_archs() {
            let m = random_model(&arch, 3);
            let mut s = Stream::new(12);
            for _ in 0..10 {
                let u = [s.uniform(), s.uniform()];
                let v = [s.uniform(), s.uniform()];
                let gu = m.constituents(&DMatrix::from_row_slice(1, 2, &u)).unwrap();
                let gv = m.constituents(&DMatrix::from_row_slice(1, 2, &v)).unwrap();
                let mut want = 0.0;
                for r in 0..3 {
                    for q in 0..3 {
                        want += m.lambda()[(r, q)] * gu[(0, r)] * gv[(0, q)];
                    }
                }
                let got = m.kernel_at(&u, &v).unwrap();
                assert!((got - want).abs() < 1e-13);
                assert_eq!(got.to_bits(), m.kernel_at(&v, &u).unwrap().to_bits());
                assert!(m.kernel_at(&u, &u).unwrap() >= 0.0);
            }
        }
    }

    #[test]
    fn kernel_pairs_agree_with_kernel_at() {
        let arch = Architecture::deep_shared(3, 2, 2).unwrap();
        let m = random_model(&arch, 4);
        let mut s = Stream::new(1);
        let us = DMatrix::from_fn(5, 2, |_, _| s.uniform());
        let vs = DMatrix::from_fn(5, 2, |_, _| s.uniform());
        let pairs = m.kernel_pairs(&us, &vs).unwrap();
        for i in 0..5 {
            let u: Vec<f64> = us.row(i).iter().copied().collect();
            let v: Vec<f64> = vs.row(i).iter().copied().collect();
            assert!((pairs[i] - m.kernel_at(&u, &v).unwrap()).abs() < 1e-15);
        }
    }

    #[test]
    fn sampled_kernel_matrices_are_nonnegative_definite() {
        for arch in all_archs() {
            let m = random_model(&arch, 7);
            let mut s = Stream::new(2);
            let pts = DMatrix::from_fn(50, 2, |_, _| s.uniform());
            let z = m.constituents(&pts).unwrap();
            let k = &z * m.lambda() * z.transpose();
            for _ in 0..20 {
                let alpha = DVector::from_fn(50, |_, _| s.normal());
                let q = (alpha.transpose() * &k * &alpha)[(0, 0)];
                assert!(q >= -1e-10 * alpha.norm_squared());
            }
        }
    }

    #[test]
    fn rejects_non_psd_lambda() {
        let arch = Architecture::shallow(2, 1).unwrap();
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.1]);
        assert!(FittedCovariance::new(arch.clone(), ModelParams::zeros(&arch), bad, None).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(
            FittedCovariance::new(arch.clone(), ModelParams::zeros(&arch), asym, None).is_err()
        );
    }

    #[test]
    fn flat_round_trip() {
        let arch = Architecture::deep(2, 3, 2).unwrap();
        let p = random_params(&arch, 9, 1.0);
        let mut flat = Vec::new();
        p.write_flat(&mut flat);
        assert_eq!(flat.len(), arch.parameter_count());
        let mut q = ModelParams::zeros(&arch);
        assert_eq!(q.read_flat(&flat), flat.len());
        assert_eq!(p, q);
    }
}
