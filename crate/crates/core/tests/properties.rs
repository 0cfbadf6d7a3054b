use covnet_core::baselines::{best_separable_2d, relative_error_mc, DenseCovariance};
use covnet_core::cv::cv_loss;
use covnet_core::simulate::{
    kernel_matrix, rotation_2d_45, rotation_3d_composed, DEFAULT_KERNEL_CAP,
};
use covnet_core::{
    constituent_gram, eigendecompose, kernel_eval, lambda_from_coefficients, loss,
    threshold_lambda, ArchKind, Architecture, FieldMatrix, FittedCovariance, Grid, KernelSpec,
    ModelParams, Stream,
};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn arch_for(kind: u8, r: usize, d: usize) -> Architecture {
    match kind % 3 {
        0 => Architecture::shallow(r, d).unwrap(),
        1 => Architecture::new(ArchKind::Deep, r, d, vec![2, 3]).unwrap(),
        _ => Architecture::deep_shared(r, d, 2).unwrap(),
    }
}

fn random_model(kind: u8, r: usize, d: usize, seed: u64) -> FittedCovariance {
    let arch = arch_for(kind, r, d);
    let mut s = Stream::new(seed);
    let mut p = ModelParams::zeros(&arch);
    let flat: Vec<f64> = (0..p.param_len()).map(|_| 2.0 * s.normal()).collect();
    p.read_flat(&flat);
    let xi = DMatrix::from_fn(r + 2, r, |_, _| s.normal());
    FittedCovariance::new(arch, p, lambda_from_coefficients(&xi, true), None).unwrap()
}

fn random_fields(grid: &Grid, n: usize, s: &mut Stream) -> FieldMatrix {
    FieldMatrix::new(
        grid.clone(),
        n,
        (0..n * grid.len()).map(|_| s.normal()).collect(),
    )
    .unwrap()
}

fn min_eig(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.min()
}

fn all_specs(d: usize) -> Vec<KernelSpec> {
    let mut v = vec![
        KernelSpec::BrownianSheet,
        KernelSpec::IntegratedBrownianSheet,
        KernelSpec::Matern { nu: 0.7 },
    ];
    let rot = if d == 2 {
        rotation_2d_45()
    } else {
        rotation_3d_composed()
    };
    v.push(KernelSpec::RotatedBrownianSheet(rot.clone()));
    v.push(KernelSpec::RotatedIntegratedBrownianSheet(rot));
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn kernel_at_is_symmetric_and_psd_on_samples(kind in 0u8..3, r in 1usize..5, d in 1usize..4, seed in any::<u64>()) {
        let m = random_model(kind, r, d, seed);
        let mut s = Stream::new(seed ^ 1);
        let pts: Vec<Vec<f64>> = (0..12).map(|_| (0..d).map(|_| s.uniform()).collect()).collect();
        let k = DMatrix::from_fn(12, 12, |i, j| m.kernel_at(&pts[i], &pts[j]).unwrap());
        for i in 0..12 {
            for j in 0..12 {
                prop_assert_eq!(k[(i, j)].to_bits(), k[(j, i)].to_bits());
            }
        }
        let alpha: Vec<f64> = (0..12).map(|_| s.normal()).collect();
        let q: f64 = (0..12).flat_map(|i| (0..12).map(move |j| (i, j))).map(|(i, j)| alpha[i] * alpha[j] * k[(i, j)]).sum();
        let a2: f64 = alpha.iter().map(|a| a * a).sum();
        prop_assert!(q >= -1e-10 * a2 * (1.0 + m.lambda().trace()));
    }

    #[test]
    fn lambda_from_coefficients_is_psd(n in 1usize..12, r in 1usize..6, center in any::<bool>(), seed in any::<u64>()) {
        let mut s = Stream::new(seed);
        let xi = DMatrix::from_fn(n, r, |_, _| 10.0 * s.normal());
        let l = lambda_from_coefficients(&xi, center);
        prop_assert!((&l - l.transpose()).amax() <= 1e-12 * l.amax().max(1e-300));
        prop_assert!(min_eig(&l) >= -1e-10 * l.trace().abs().max(1e-300));
    }

    #[test]
    fn loss_is_nonnegative_and_scales_quartically(kind in 0u8..3, r in 1usize..4, seed in any::<u64>(), c in 0.1f64..4.0) {
        let arch = arch_for(kind, r, 2);
        let m = random_model(kind, r, 2, seed);
        let grid = Grid::new(2, &[3, 4]).unwrap();
        let mut s = Stream::new(seed ^ 2);
        let f = random_fields(&grid, 5, &mut s).centered();
        let xi = DMatrix::from_fn(5, r, |_, _| s.normal());
        let base = loss(&f, m.params(), &arch, &xi).unwrap();
        prop_assert!(base.total >= -1e-10 * (base.term_xx + base.term_gg));
        let scaled = loss(&f.scaled(c), m.params(), &arch, &(&xi * c)).unwrap();
        prop_assert!((scaled.total - c.powi(4) * base.total).abs() <= 1e-10 * c.powi(4) * (base.term_xx + base.term_gg));
    }

    #[test]
    fn kernels_are_symmetric(d in 2usize..4, seed in any::<u64>()) {
        let mut s = Stream::new(seed);
        let u: Vec<f64> = (0..d).map(|_| s.uniform()).collect();
        let v: Vec<f64> = (0..d).map(|_| s.uniform()).collect();
        for (i, spec) in all_specs(d).iter().enumerate() {
            let a = kernel_eval(spec, &u, &v).unwrap();
            let b = kernel_eval(spec, &v, &u).unwrap();
            if i < 3 {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            } else {
                prop_assert!((a - b).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn kernel_matrices_are_psd(k1 in 2usize..8, k2 in 2usize..8) {
        let grid = Grid::new(2, &[k1, k2]).unwrap();
        for spec in all_specs(2) {
            let m = kernel_matrix(&spec, &grid, DEFAULT_KERNEL_CAP).unwrap();
            prop_assert!(min_eig(&m) >= -1e-8 * m.trace());
        }
    }

    #[test]
    fn eigensystem_is_gram_orthonormal(kind in 0u8..3, r in 1usize..5, seed in any::<u64>()) {
        let m = random_model(kind, r, 2, seed);
        let gram = constituent_gram(&m, 4000, seed).unwrap();
        let g = &gram.matrix;
        prop_assert!(g.iter().all(|x| (0.0..=1.0).contains(x)));
        let es = eigendecompose(&m, &gram).unwrap();
        let a = &es.coefficients;
        let ortho = a * g * a.transpose();
        prop_assert!((ortho - DMatrix::identity(es.rank, es.rank)).amax() <= 1e-8);
        prop_assert!(es.eigenvalues.iter().all(|&e| e >= 0.0));
        prop_assert!(es.eigenvalues.as_slice().windows(2).all(|w| w[0] >= w[1]));
        let glg = g * m.lambda() * g;
        let direct: f64 = (0..es.rank).map(|i| (a.row(i) * &glg * a.row(i).transpose())[(0, 0)]).sum();
        prop_assert!((direct - es.eigenvalues.sum()).abs() <= 1e-8 * (1.0 + direct.abs()));
    }

    #[test]
    fn thresholding_is_idempotent(r in 1usize..5, seed in any::<u64>(), frac in 0.0f64..1.0) {
        let m = random_model(0, r, 2, seed);
        let level = frac * m.lambda().trace();
        let once = threshold_lambda(&m, level).unwrap();
        let twice = threshold_lambda(&once, level).unwrap();
        let eig = |x: &FittedCovariance| {
            let mut v: Vec<f64> = x.lambda().clone().symmetric_eigen().eigenvalues.iter().copied().collect();
            v.sort_by(f64::total_cmp);
            v
        };
        for (a, b) in eig(&once).iter().zip(eig(&twice)) {
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn truth_has_zero_error_against_itself(d in 2usize..4, seed in any::<u64>()) {
        for spec in all_specs(d) {
            prop_assert_eq!(relative_error_mc(&spec, &spec, d, 500, seed).unwrap(), 0.0);
        }
    }

    #[test]
    fn separable_fit_beats_constant(k1 in 2usize..6, k2 in 2usize..6, seed in any::<u64>()) {
        let grid = Grid::new(2, &[k1, k2]).unwrap();
        let mut s = Stream::new(seed);
        let x = DMatrix::from_fn(grid.len(), grid.len(), |_, _| s.normal());
        let c = DenseCovariance { grid: grid.clone(), matrix: &x * x.transpose() };
        let sep = best_separable_2d(&c).unwrap();
        let err = (sep.matrix() - &c.matrix).norm();
        let mean = c.matrix.mean();
        let trivial = c.matrix.map(|v| v - mean).norm();
        prop_assert!(err <= trivial * (1.0 + 1e-12));
    }

    #[test]
    fn cv_loss_is_nonnegative(kind in 0u8..3, r in 1usize..4, seed in any::<u64>()) {
        let m = random_model(kind, r, 2, seed);
        let grid = Grid::cube(2, 4).unwrap();
        let mut s = Stream::new(seed ^ 3);
        let v = random_fields(&grid, 6, &mut s);
        let l = cv_loss(&m, &v).unwrap();
        let scale = v.to_matrix().norm_squared().powi(2) + m.lambda().norm_squared();
        prop_assert!(l >= -1e-10 * scale);
    }
}
