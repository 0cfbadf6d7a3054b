//! V-fold cross-validation over CovNet hyperparameters.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::field::{cross_gram, FieldMatrix};
use crate::model::{Architecture, FittedCovariance};
use crate::rng::{mix_seed, Stream};
use crate::train::{fit, TrainConfig};

pub const DEFAULT_FOLDS: usize = 5;

/// Squared Hilbert-Schmidt distance between the fitted covariance and the
/// empirical covariance of `validation`, from inner products only.
pub fn cv_loss(model: &FittedCovariance, validation: &FieldMatrix) -> Result<f64> {
    let arch = model.architecture();
    if validation.grid().dim() != arch.d() {
        return Err(invalid!(
            "validation grid is {}-dimensional, model expects d = {}",
            validation.grid().dim(),
            arch.d()
        ));
    }
    if validation.n() == 0 {
        return Err(invalid!("validation set is empty"));
    }
    let dd = validation.grid().len() as f64;
    let n2 = validation.n() as f64;
    let z = model.constituents(&validation.grid().coordinates())?;
    let g = z.tr_mul(&z) / dd;
    let lambda = model.lambda();
    let gl = &g * lambda;
    let model_term = gl.component_mul(&gl.transpose()).sum();
    let data_term = cross_gram(validation, validation)?.sum_of_squares() / (n2 * n2);
    let p = validation.transposed_view().tr_mul(&z) / dd;
    let cross_term = (&p * lambda).component_mul(&p).sum() / n2;
    Ok(model_term + data_term - 2.0 * cross_term)
}

/// One hyperparameter setting to be scored.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub arch: Architecture,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub candidates: Vec<Candidate>,
    pub folds: usize,
    /// Per candidate, per fold; empty for failed candidates.
    pub fold_losses: Vec<Vec<f64>>,
    /// Mean fold loss; `None` marks a failed candidate.
    pub mean_losses: Vec<Option<f64>>,
    /// Why a candidate failed, if it did.
    pub failures: Vec<Option<String>>,
    pub selected: usize,
}

/// Row indices of each fold: a seeded shuffle cut into `v` contiguous parts
/// whose sizes differ by at most one.
pub fn fold_assignment(n: usize, v: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if v < 2 {
        return Err(invalid!("need at least 2 folds, got {v}"));
    }
    if n < v {
        return Err(invalid!("cannot split {n} samples into {v} folds"));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    Stream::derived(seed, &[0xf01d]).shuffle(&mut perm);
    let (base, extra) = (n / v, n % v);
    let mut folds = Vec::with_capacity(v);
    let mut start = 0;
    for k in 0..v {
        let len = base + usize::from(k < extra);
        let mut fold = perm[start..start + len].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += len;
    }
    Ok(folds)
}

/// Training seed of one (candidate, fold) cell. It depends on the
/// candidate's own seed rather than its position, so duplicated candidates
/// produce identical scores.
pub fn cell_seed(seed: u64, candidate: &Candidate, fold: usize) -> u64 {
    mix_seed(seed, &[candidate.config.seed, fold as u64])
}

/// Fits `candidate` on every fold but `fold` and scores it on `fold`.
pub fn run_cell(
    fields: &FieldMatrix,
    candidate: &Candidate,
    folds: &[Vec<usize>],
    fold: usize,
    seed: u64,
) -> Result<f64> {
    let train_rows: Vec<usize> = folds
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != fold)
        .flat_map(|(_, rows)| rows.iter().copied())
        .collect();
    let mut train_rows = train_rows;
    train_rows.sort_unstable();
    let train = fields.select_rows(&train_rows);
    let validation = fields.select_rows(&folds[fold]).centered();
    let config = TrainConfig {
        seed: cell_seed(seed, candidate, fold),
        ..candidate.config.clone()
    };
    let out = fit(&train, &candidate.arch, &config)?;
    cv_loss(&out.model, &validation)
}

fn is_candidate_failure(e: &Error) -> bool {
    matches!(
        e,
        Error::TrainingDiverged { .. } | Error::Numeric(_) | Error::DegenerateModel(_)
    )
}

/// Builds the report from per-cell outcomes `results[candidate][fold]` and
/// picks the lowest mean loss, breaking ties by parameter count and then by
/// list order.
pub fn assemble_report(
    candidates: Vec<Candidate>,
    folds: usize,
    results: Vec<Vec<Result<f64>>>,
) -> Result<CvReport> {
    let mut fold_losses = Vec::with_capacity(candidates.len());
    let mut mean_losses = Vec::with_capacity(candidates.len());
    let mut failures = Vec::with_capacity(candidates.len());
    for cells in results {
        let mut losses = Vec::with_capacity(folds);
        let mut failure = None;
        for cell in cells {
            match cell {
                Ok(l) => losses.push(l),
                Err(e) if is_candidate_failure(&e) => {
                    failure = Some(e.to_string());
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        match failure {
            Some(msg) => {
                fold_losses.push(Vec::new());
                mean_losses.push(None);
                failures.push(Some(msg));
            }
            None => {
                let mean = losses.iter().sum::<f64>() / losses.len() as f64;
                fold_losses.push(losses);
                mean_losses.push(Some(mean));
                failures.push(None);
            }
        }
    }
    let selected = mean_losses
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.map(|m| (i, m)))
        .min_by(|a, b| {
            a.1.total_cmp(&b.1)
                .then(
                    candidates[a.0]
                        .arch
                        .total_parameter_count()
                        .cmp(&candidates[b.0].arch.total_parameter_count()),
                )
                .then(a.0.cmp(&b.0))
        })
        .map(|(i, _)| i)
        .ok_or(Error::AllCandidatesFailed(candidates.len()))?;
    Ok(CvReport {
        candidates,
        folds,
        fold_losses,
        mean_losses,
        failures,
        selected,
    })
}

fn check_candidates(fields: &FieldMatrix, candidates: &[Candidate]) -> Result<()> {
    if candidates.is_empty() {
        return Err(invalid!("no candidates to cross-validate"));
    }
    for c in candidates {
        c.config.validate()?;
        if c.arch.d() != fields.grid().dim() {
            return Err(invalid!(
                "candidate {} expects d = {}",
                c.arch.label(),
                c.arch.d()
            ));
        }
    }
    Ok(())
}

/// Runs every (candidate, fold) cell through `run` and assembles the report.
/// `run` receives the candidate index and fold index and must return the
/// cell outcomes in that same layout.
pub fn cross_validate_with<F>(
    fields: &FieldMatrix,
    candidates: &[Candidate],
    v: usize,
    seed: u64,
    run: F,
) -> Result<CvReport>
where
    F: FnOnce(&(dyn Fn(usize, usize) -> Result<f64> + Sync), usize, usize) -> Vec<Vec<Result<f64>>>,
{
    check_candidates(fields, candidates)?;
    let folds = fold_assignment(fields.n(), v, seed)?;
    let cell = |c: usize, k: usize| run_cell(fields, &candidates[c], &folds, k, seed);
    let results = run(&cell, candidates.len(), v);
    assemble_report(candidates.to_vec(), v, results)
}

/// Serial cross-validation.
pub fn cross_validate(
    fields: &FieldMatrix,
    candidates: &[Candidate],
    v: usize,
    seed: u64,
) -> Result<CvReport> {
    cross_validate_with(fields, candidates, v, seed, |cell, nc, nv| {
        (0..nc)
            .map(|c| (0..nv).map(|k| cell(c, k)).collect())
            .collect()
    })
}

/// Default search grid: shallow `R in {5,10,20,40,80}` and deep/deepshared
/// `L in {2,3,4}`, `R in {5,10,20,40}`.
pub fn default_candidates(d: usize, config: &TrainConfig) -> Result<Vec<Candidate>> {
    let mut out = Vec::new();
    for r in [5, 10, 20, 40, 80] {
        out.push(Candidate {
            arch: Architecture::shallow(r, d)?,
            config: config.clone(),
        });
    }
    for l in [2, 3, 4] {
        for r in [5, 10, 20, 40] {
            out.push(Candidate {
                arch: Architecture::deep(r, d, l)?,
                config: config.clone(),
            });
            out.push(Candidate {
                arch: Architecture::deep_shared(r, d, l)?,
                config: config.clone(),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Grid;
    use crate::model::{center_columns, fitted_fields, lambda_from_coefficients, ModelParams};
    use alloc::vec;
    use nalgebra::DMatrix;

    /// Dense reference for [`cv_loss`]: `D^{-2} ||Z Lambda Z^T - X^T X / N||_F^2`.
    fn cv_loss_dense(model: &FittedCovariance, validation: &FieldMatrix) -> Result<f64> {
        let dd = validation.grid().len() as f64;
        let z = model.constituents(&validation.grid().coordinates())?;
        let x: DMatrix<f64> = validation.to_matrix();
        let diff = &z * model.lambda() * z.transpose() - x.tr_mul(&x) / validation.n() as f64;
        Ok(diff.norm_squared() / (dd * dd))
    }

    fn rand_model(r: usize, d: usize, seed: u64) -> (FittedCovariance, DMatrix<f64>) {
        let arch = Architecture::shallow(r, d).unwrap();
        let mut s = Stream::new(seed);
        let mut p = ModelParams::zeros(&arch);
        let mut flat = Vec::new();
        p.write_flat(&mut flat);
        let flat: Vec<f64> = flat.iter().map(|_| 2.0 * s.normal()).collect();
        p.read_flat(&flat);
        let xi = center_columns(&DMatrix::from_fn(4, r, |_, _| s.normal()));
        let m = FittedCovariance::new(arch, p, lambda_from_coefficients(&xi, true), None).unwrap();
        (m, xi)
    }

    #[test]
    fn zero_loss_when_validation_is_the_fit() {
        let grid = Grid::new(2, &[6, 6]).unwrap();
        let (m, xi) = rand_model(3, 2, 1);
        let va = fitted_fields(m.params(), m.architecture(), &xi, &grid).unwrap();
        let l = cv_loss(&m, &va).unwrap();
        assert!(l.abs() < 1e-10, "{l}");
    }

    #[test]
    fn zero_lambda_leaves_data_term() {
        let grid = Grid::new(2, &[6, 6]).unwrap();
        let (m, _) = rand_model(3, 2, 2);
        let m = m.with_lambda(DMatrix::zeros(3, 3)).unwrap();
        let mut s = Stream::new(3);
        let va = FieldMatrix::new(grid.clone(), 4, (0..144).map(|_| s.normal()).collect()).unwrap();
        let want = cross_gram(&va, &va).unwrap().sum_of_squares() / 16.0;
        assert!((cv_loss(&m, &va).unwrap() - want).abs() < 1e-12 * want);
    }

    #[test]
    fn matches_dense_oracle() {
        let grid = Grid::new(2, &[6, 6]).unwrap();
        let (m, _) = rand_model(3, 2, 4);
        let mut s = Stream::new(5);
        let va = FieldMatrix::new(grid, 4, (0..144).map(|_| s.normal()).collect())
            .unwrap()
            .centered();
        let a = cv_loss(&m, &va).unwrap();
        let b = cv_loss_dense(&m, &va).unwrap();
        assert!((a - b).abs() < 1e-8 * b);
        assert!(a >= 0.0);
    }

    #[test]
    fn folds_partition_samples() {
        let folds = fold_assignment(23, 5, 9).unwrap();
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![5, 5, 5, 4, 4]);
        assert_eq!(folds, fold_assignment(23, 5, 9).unwrap());
        assert!(fold_assignment(3, 5, 0).is_err());
        assert!(fold_assignment(10, 1, 0).is_err());
    }

    fn rank_two_fields(n: usize, seed: u64) -> FieldMatrix {
        let grid = Grid::new(1, &[16]).unwrap();
        let mut s = Stream::new(seed);
        let mut values = Vec::new();
        for _ in 0..n {
            let (a, b) = (s.normal(), 0.5 * s.normal());
            for i in 0..16 {
                let u = grid.coordinate(i)[0];
                values.push(a * u + b * (1.0 - u) * (1.0 - u));
            }
        }
        FieldMatrix::new(grid, n, values).unwrap()
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn single_candidate_is_selected() {
        let f = rank_two_fields(12, 1);
        let c = vec![Candidate {
            arch: Architecture::shallow(2, 1).unwrap(),
            config: quick(50),
        }];
        let rep = cross_validate(&f, &c, 3, 4).unwrap();
        assert_eq!(rep.selected, 0);
        assert_eq!(rep.fold_losses[0].len(), 3);
    }

    #[test]
    fn identical_candidates_tie_by_order() {
        let f = rank_two_fields(12, 2);
        let one = Candidate {
            arch: Architecture::shallow(2, 1).unwrap(),
            config: quick(50),
        };
        let rep = cross_validate(&f, &[one.clone(), one], 3, 4).unwrap();
        assert_eq!(rep.mean_losses[0], rep.mean_losses[1]);
        assert_eq!(rep.selected, 0);
    }

    #[test]
    fn divergent_candidates_are_excluded() {
        let f = rank_two_fields(12, 3);
        let bad = Candidate {
            arch: Architecture::shallow(2, 1).unwrap(),
            config: TrainConfig {
                lr: 1e6,
                epochs: 100,
                ..TrainConfig::default()
            },
        };
        let good = Candidate {
            arch: Architecture::shallow(1, 1).unwrap(),
            config: quick(50),
        };
        let rep = cross_validate(&f, &[bad.clone(), good], 3, 1).unwrap();
        assert!(rep.failures[0].is_some());
        assert_eq!(rep.selected, 1);
        assert!(matches!(
            cross_validate(&f, &[bad], 3, 1),
            Err(Error::AllCandidatesFailed(1))
        ));
    }

    #[test]
    fn selection_is_minimum_of_own_table() {
        let f = rank_two_fields(30, 4);
        let cands: Vec<Candidate> = [1, 2, 8]
            .iter()
            .map(|&r| Candidate {
                arch: Architecture::shallow(r, 1).unwrap(),
                config: quick(300),
            })
            .collect();
        let rep = cross_validate(&f, &cands, 3, 7).unwrap();
        let best = (0..3)
            .min_by(|&a, &b| {
                rep.mean_losses[a]
                    .unwrap()
                    .total_cmp(&rep.mean_losses[b].unwrap())
            })
            .unwrap();
        assert_eq!(rep.selected, best);
        for (c, losses) in rep.fold_losses.iter().enumerate() {
            let mean = losses.iter().sum::<f64>() / 3.0;
            assert_eq!(rep.mean_losses[c], Some(mean));
        }
    }

    #[test]
    fn default_grid_shape() {
        let c = default_candidates(2, &TrainConfig::default()).unwrap();
        assert_eq!(c.len(), 5 + 3 * 4 * 2);
    }
}
