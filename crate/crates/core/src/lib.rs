//! Covariance estimation for functional data on regular grids with
//! neural-network covariance models.
#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod baselines;
pub mod cv;
pub mod error;
pub mod field;
pub mod model;
pub mod rng;
pub mod simulate;
pub mod special;
pub mod spectral;
pub mod train;

pub use baselines::{
    best_separable_2d, empirical_covariance, hs_norm_sq_mc, relative_error_mc, CovarianceKernel,
    DenseCovariance, SeparableCovariance, ZeroKernel,
};
pub use cv::{
    cross_validate, cross_validate_with, cv_loss, default_candidates, fold_assignment, Candidate,
    CvReport,
};
pub use error::{Error, Result};
pub use field::{cross_gram, inner_product, FieldMatrix, GramMatrix, Grid};
pub use model::{
    eval_constituents, fitted_fields, init_params, lambda_from_coefficients, ArchKind,
    Architecture, FittedCovariance, Layer, ModelParams, Network,
};
pub use rng::{mix_seed, Stream};
pub use simulate::{
    kernel_eval, kernel_matrix, sample_gaussian_fields, KernelSpec, NoiseSpec, Rotation,
};
pub use spectral::{
    constituent_gram, eigendecompose, eval_eigenfunction, threshold_lambda, ConstituentGram,
    EigenSystem,
};
pub use train::{
    adam_step, fit, gradients, loss, loss_for, loss_with_mean, AdamConfig, AdamState, CenterMode,
    FitOutput, Gradients, LossBreakdown, TrainConfig,
};
