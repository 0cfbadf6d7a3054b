//! Gram-form fitting loss, reverse-mode gradients, and the ADAM loop.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{invalid, Error, Result};
use crate::field::{cross_gram, FieldMatrix};
use crate::model::{
    backward_from_constituents, center_columns, coefficient_means, fitted_fields,
    forward_with_trace, init_params, lambda_from_coefficients, Architecture, FittedCovariance,
    ModelParams,
};
use crate::rng::Stream;

/// How the mean of the fields is handled during fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CenterMode {
    /// Fields are centered by their empirical mean before fitting.
    PreCenter,
    /// Mean and covariance are fitted together from uncentered fields.
    JointMean,
}

impl CenterMode {
    pub fn name(self) -> &'static str {
        match self {
            CenterMode::PreCenter => "pre_center",
            CenterMode::JointMean => "joint_mean",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pre_center" => Some(CenterMode::PreCenter),
            "joint_mean" => Some(CenterMode::JointMean),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Stop once the relative loss change over `window` epochs drops below this.
    pub rel_tol: f64,
    pub window: usize,
    pub seed: u64,
    pub center_mode: CenterMode,
    /// Minibatch size over samples; `None` means full batch.
    pub batch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5000,
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            rel_tol: 1e-7,
            window: 50,
            seed: 0,
            center_mode: CenterMode::PreCenter,
            batch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid!("ADAM betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(invalid!("ADAM epsilon must be positive"));
        }
        if !(self.rel_tol >= 0.0) {
            return Err(invalid!("rel_tol must be non-negative"));
        }
        if self.window == 0 {
            return Err(invalid!("early-stopping window must be at least 1"));
        }
        if self.batch == Some(0) {
            return Err(invalid!("batch size must be positive"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// `total = term_xx + term_gg - 2 term_xg`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub term_xx: f64,
    pub term_gg: f64,
    pub term_xg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(term_xx: f64, term_gg: f64, term_xg: f64) -> Self {
        Self {
            term_xx,
            term_gg,
            term_xg,
            total: term_xx + term_gg - 2.0 * term_xg,
        }
    }
}

fn check_inputs(
    f: &FieldMatrix,
    params: &ModelParams,
    arch: &Architecture,
    xi: &DMatrix<f64>,
) -> Result<()> {
    params.check(arch)?;
    if f.grid().dim() != arch.d() {
        return Err(invalid!(
            "fields live on a {}-dimensional grid, model expects d = {}",
            f.grid().dim(),
            arch.d()
        ));
    }
    if xi.shape() != (f.n(), arch.r()) {
        return Err(invalid!(
            "coefficient matrix is {:?}, expected ({}, {})",
            xi.shape(),
            f.n(),
            arch.r()
        ));
    }
    if xi.iter().any(|x| !x.is_finite()) {
        return Err(invalid!("coefficient matrix has non-finite entries"));
    }
    Ok(())
}

fn gram_terms(f: &FieldMatrix, y: &FieldMatrix) -> Result<(f64, f64, f64, [f64; 3])> {
    let xx = cross_gram(f, f)?;
    let yy = cross_gram(y, y)?;
    let xy = cross_gram(f, y)?;
    let n2 = (f.n() * f.n()) as f64;
    Ok((
        xx.sum_of_squares() / n2,
        yy.sum_of_squares() / n2,
        xy.sum_of_squares() / n2,
        [xx.mean(), yy.mean(), xy.mean()],
    ))
}

/// Loss for centered fields: the fitted fields are built from column-centered
/// coefficients, so both sides of the comparison are centered.
pub fn loss(
    f: &FieldMatrix,
    params: &ModelParams,
    arch: &Architecture,
    xi: &DMatrix<f64>,
) -> Result<LossBreakdown> {
    check_inputs(f, params, arch, xi)?;
    let y = fitted_fields(params, arch, &center_columns(xi), f.grid())?;
    let (xx, gg, xg, _) = gram_terms(f, &y)?;
    Ok(LossBreakdown::new(xx, gg, xg))
}

/// Loss for uncentered fields with the mean fitted jointly: the uncentered
/// three-term loss plus the mismatch of the mean outer products.
pub fn loss_with_mean(
    f: &FieldMatrix,
    params: &ModelParams,
    arch: &Architecture,
    xi: &DMatrix<f64>,
) -> Result<LossBreakdown> {
    check_inputs(f, params, arch, xi)?;
    let y = fitted_fields(params, arch, xi, f.grid())?;
    let (xx, gg, xg, [a, b, c]) = gram_terms(f, &y)?;
    Ok(LossBreakdown::new(xx + a * a, gg + b * b, xg + c * c))
}

pub fn loss_for(
    mode: CenterMode,
    f: &FieldMatrix,
    params: &ModelParams,
    arch: &Architecture,
    xi: &DMatrix<f64>,
) -> Result<LossBreakdown> {
    match mode {
        CenterMode::PreCenter => loss(f, params, arch, xi),
        CenterMode::JointMean => loss_with_mean(f, params, arch, xi),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: ModelParams,
    pub xi: DMatrix<f64>,
}

/// Data-side quantities that stay fixed during training.
pub(crate) struct Objective<'a> {
    fields: &'a FieldMatrix,
    points: DMatrix<f64>,
    mode: CenterMode,
    term_xx: f64,
    mean_xx: f64,
}

impl<'a> Objective<'a> {
    pub(crate) fn new(fields: &'a FieldMatrix, mode: CenterMode) -> Result<Self> {
        let xx = cross_gram(fields, fields)?;
        let n2 = (fields.n() * fields.n()) as f64;
        Ok(Self {
            fields,
            points: fields.grid().coordinates(),
            mode,
            term_xx: xx.sum_of_squares() / n2,
            mean_xx: xx.mean(),
        })
    }

    /// Loss and exact gradients using `R x R` reductions:
    /// `G = Z^T Z / D`, `P = X Z / D`, `S = Xi^T Xi` (Xi centered in
    /// pre-center mode), so that `gg = tr(GSGS)/N^2`, `xg = tr(P^T P S)/N^2`.
    pub(crate) fn evaluate(
        &self,
        params: &ModelParams,
        arch: &Architecture,
        xi: &DMatrix<f64>,
    ) -> (LossBreakdown, Gradients) {
        let x = self.fields;
        let n = x.n() as f64;
        let dd = x.grid().len() as f64;
        let k = 1.0 / (n * n);

        let trace = forward_with_trace(params, arch, &self.points);
        let z = &trace.constituents;
        let g = z.tr_mul(z) / dd;
        let xt = x.transposed_view();
        let p = xt.tr_mul(z) / dd;

        let joint = self.mode == CenterMode::JointMean;
        let xi_s = if joint {
            xi.clone()
        } else {
            center_columns(xi)
        };
        let s = xi_s.tr_mul(&xi_s);
        let q = p.tr_mul(&p);
        let gs = &g * &s;
        let term_gg = k * gs.component_mul(&gs.transpose()).sum();
        let term_xg = k * q.component_mul(&s).sum();

        let gsg = &gs * &g;
        let mut d_g = (&s * &gs) * (2.0 * k);
        let d_s = (&gsg - &q) * (2.0 * k);
        let mut d_p = (&p * &s) * (-4.0 * k);

        let mut breakdown = LossBreakdown::new(self.term_xx, term_gg, term_xg);
        let mut d_xi_mean: Option<DVector<f64>> = None;
        if joint {
            let xi_bar = coefficient_means(xi);
            let p_bar = coefficient_means(&p);
            let g_xi = &g * &xi_bar;
            let b = xi_bar.dot(&g_xi);
            let c = p_bar.dot(&xi_bar);
            let a = self.mean_xx;
            breakdown = LossBreakdown::new(self.term_xx + a * a, term_gg + b * b, term_xg + c * c);
            d_g += (&xi_bar * xi_bar.transpose()) * (2.0 * b);
            let row = xi_bar.transpose() * (-4.0 * c / n);
            for mut r in d_p.row_iter_mut() {
                r += &row;
            }
            d_xi_mean = Some(g_xi * (4.0 * b) - p_bar * (4.0 * c));
        }

        let mut d_xi = (&xi_s * &d_s) * 2.0;
        match d_xi_mean {
            Some(m) => {
                let row = m.transpose() / n;
                for mut r in d_xi.row_iter_mut() {
                    r += &row;
                }
            }
            None => d_xi = center_columns(&d_xi),
        }

        let d_g_sym = &d_g + d_g.transpose();
        let mut d_z = (z * d_g_sym) / dd;
        d_z += xt * (d_p / dd);
        let d_params = backward_from_constituents(params, &self.points, &trace, &d_z);
        (
            breakdown,
            Gradients {
                params: d_params,
                xi: d_xi,
            },
        )
    }
}

/// Exact gradient of the loss selected by `mode` with respect to every
/// network parameter and every coefficient.
pub fn gradients(
    f: &FieldMatrix,
    params: &ModelParams,
    arch: &Architecture,
    xi: &DMatrix<f64>,
    mode: CenterMode,
) -> Result<(LossBreakdown, Gradients)> {
    check_inputs(f, params, arch, xi)?;
    Ok(Objective::new(f, mode)?.evaluate(params, arch, xi))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One bias-corrected ADAM update at step `t >= 1`.
pub fn adam_step(
    theta: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &AdamConfig,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(invalid!("ADAM step counter starts at 1"));
    }
    if theta.len() != grads.len() || state.m.len() != theta.len() || state.v.len() != theta.len() {
        return Err(invalid!(
            "ADAM state, parameters and gradients differ in length"
        ));
    }
    let t = t.min(i32::MAX as u64) as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..theta.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        theta[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Result of [`fit`].
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub model: FittedCovariance,
    /// Loss at each evaluated epoch (on the minibatch when batching).
    pub trace: Vec<LossBreakdown>,
    /// Epoch whose parameters were frozen into the model.
    pub best_epoch: usize,
}

pub const DIVERGENCE_FACTOR: f64 = 1e6;

fn flatten(params: &ModelParams, xi: &DMatrix<f64>, out: &mut Vec<f64>) {
    out.clear();
    params.write_flat(out);
    out.extend_from_slice(xi.as_slice());
}

fn unflatten(src: &[f64], params: &mut ModelParams, xi: &mut DMatrix<f64>) {
    let used = params.read_flat(src);
    xi.as_mut_slice().copy_from_slice(&src[used..]);
}

fn batch_rows(stream: &mut Stream, n: usize, b: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    stream.shuffle(&mut idx);
    idx.truncate(b);
    idx.sort_unstable();
    idx
}

/// Minimizes the selected loss with ADAM from [`init_params`] and freezes
/// the parameters with the lowest loss seen.
pub fn fit(f: &FieldMatrix, arch: &Architecture, cfg: &TrainConfig) -> Result<FitOutput> {
    cfg.validate()?;
    if f.n() < 2 {
        return Err(invalid!("need at least 2 fields to fit, got {}", f.n()));
    }
    if f.grid().dim() != arch.d() {
        return Err(invalid!(
            "fields live on a {}-dimensional grid, model expects d = {}",
            f.grid().dim(),
            arch.d()
        ));
    }
    if arch.r() >= f.n() {
        log::warn!(
            "R = {} is not below N = {}; the fit can interpolate the data",
            arch.r(),
            f.n()
        );
    }
    let data = match cfg.center_mode {
        CenterMode::PreCenter => f.centered(),
        CenterMode::JointMean => f.clone(),
    };
    let n = data.n();
    let batch = cfg.batch.filter(|&b| b < n);

    let (mut params, mut xi) = init_params(arch, n, cfg.seed)?;
    let mut theta = Vec::new();
    flatten(&params, &xi, &mut theta);
    let mut best = theta.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut state = AdamState::new(theta.len());
    let adam = cfg.adam();
    let mut trace: Vec<LossBreakdown> = Vec::new();
    let mut grad_flat = Vec::with_capacity(theta.len());
    let mut batch_stream = Stream::derived(cfg.seed, &[0xba7c]);
    let full = if batch.is_none() {
        Some(Objective::new(&data, cfg.center_mode)?)
    } else {
        None
    };
    let mut initial = None;

    for epoch in 0..cfg.epochs {
        let (lb, grads) = match (&full, batch) {
            (Some(obj), _) => obj.evaluate(&params, arch, &xi),
            (None, Some(b)) => {
                let rows = batch_rows(&mut batch_stream, n, b);
                let sub = data.select_rows(&rows);
                let xi_sub = xi.select_rows(rows.iter());
                let (lb, g) =
                    Objective::new(&sub, cfg.center_mode)?.evaluate(&params, arch, &xi_sub);
                let mut d_xi = DMatrix::zeros(n, arch.r());
                for (k, &r) in rows.iter().enumerate() {
                    d_xi.set_row(r, &g.xi.row(k));
                }
                (
                    lb,
                    Gradients {
                        params: g.params,
                        xi: d_xi,
                    },
                )
            }
            (None, None) => unreachable!(),
        };
        let total = lb.total;
        let init = *initial.get_or_insert(total);
        if !total.is_finite() || total > DIVERGENCE_FACTOR * init.max(f64::MIN_POSITIVE) {
            return Err(Error::TrainingDiverged { epoch, loss: total });
        }
        trace.push(lb);
        if total < best_loss {
            best_loss = total;
            best_epoch = epoch;
            best.copy_from_slice(&theta);
        }
        if epoch >= cfg.window {
            let prev = trace[epoch - cfg.window].total;
            if prev == 0.0 || ((prev - total) / prev).abs() < cfg.rel_tol {
                break;
            }
        }
        if epoch + 1 == cfg.epochs {
            break;
        }
        flatten(&grads.params, &grads.xi, &mut grad_flat);
        adam_step(&mut theta, &grad_flat, &mut state, &adam, epoch as u64 + 1)?;
        unflatten(&theta, &mut params, &mut xi);
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::TrainingDiverged {
                epoch: epoch + 1,
                loss: f64::NAN,
            });
        }
    }

    unflatten(&best, &mut params, &mut xi);
    let lambda = lambda_from_coefficients(&xi, true);
    let mean_coeffs = match cfg.center_mode {
        CenterMode::JointMean => Some(coefficient_means(&xi)),
        CenterMode::PreCenter => None,
    };
    let model = FittedCovariance::new(arch.clone(), params, lambda, mean_coeffs)?;
    Ok(FitOutput {
        model,
        trace,
        best_epoch,
    })
}
