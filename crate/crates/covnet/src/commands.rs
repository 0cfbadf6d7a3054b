//! The six pipeline subcommands.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use covnet_core::baselines::{
    best_separable_2d, empirical_covariance, relative_error_mc, CovarianceKernel, ZeroKernel,
};
use covnet_core::simulate::{sample_gaussian_fields, standard_rotation, KernelSpec, NoiseSpec};
use covnet_core::spectral::{
    constituent_gram, eigendecompose, eval_eigenfunction, threshold_lambda,
};
use covnet_core::{
    default_candidates, fit, mix_seed, ArchKind, Architecture, Candidate, CenterMode,
    FittedCovariance, Grid, TrainConfig,
};
use nalgebra::DMatrix;

use crate::config::{ensure_parent, split_list, Config, Overrides, Schema};
use crate::error::{Error, Result};
use crate::fields::{read_fields, write_fields};
use crate::model_file::{fmt_f64, load_model, save_model};
use crate::parallel::{cross_validate_parallel, threads_from_env};

pub const SIMULATE: Schema = Schema {
    command: "simulate",
    keys: &[
        ("kernel", Some("brownian")),
        ("nu", Some("0.5")),
        ("d", Some("2")),
        ("K", Some("25")),
        ("N", Some("100")),
        ("noise_sigma", Some("0")),
        ("noise_seed", None),
        ("kernel_cap", Some("20000")),
        ("output", Some("fields.cvnf")),
    ],
};

const TRAINING_KEYS: [(&str, Option<&str>); 9] = [
    ("lr", Some("0.01")),
    ("epochs", Some("5000")),
    ("beta1", Some("0.9")),
    ("beta2", Some("0.999")),
    ("eps", Some("1e-8")),
    ("rel_tol", Some("1e-7")),
    ("window", Some("50")),
    ("center_mode", Some("pre_center")),
    ("batch", None),
];

pub const FIT: Schema = Schema {
    command: "fit",
    keys: &[
        ("input", None),
        ("arch", Some("shallow")),
        ("R", Some("10")),
        ("L", None),
        TRAINING_KEYS[0],
        TRAINING_KEYS[1],
        TRAINING_KEYS[2],
        TRAINING_KEYS[3],
        TRAINING_KEYS[4],
        TRAINING_KEYS[5],
        TRAINING_KEYS[6],
        TRAINING_KEYS[7],
        TRAINING_KEYS[8],
        ("output", Some("model.covnet")),
        ("trace", Some("loss_trace.csv")),
    ],
};

pub const CV: Schema = Schema {
    command: "cv",
    keys: &[
        ("input", None),
        ("candidates", None),
        ("folds", Some("5")),
        TRAINING_KEYS[0],
        TRAINING_KEYS[1],
        TRAINING_KEYS[2],
        TRAINING_KEYS[3],
        TRAINING_KEYS[4],
        TRAINING_KEYS[5],
        TRAINING_KEYS[6],
        TRAINING_KEYS[7],
        TRAINING_KEYS[8],
        ("report", Some("cv_report.csv")),
        ("output", Some("model.covnet")),
    ],
};

pub const EIGEN: Schema = Schema {
    command: "eigen",
    keys: &[
        ("model", None),
        ("M", Some("100000")),
        ("threshold", None),
        ("K", None),
        ("count", None),
        ("eigenvalues", Some("eigenvalues.csv")),
        ("eigenfunctions", Some("eigenfunction")),
        ("thresholded", Some("thresholded.covnet")),
    ],
};

pub const EVAL: Schema = Schema {
    command: "eval",
    keys: &[
        ("truth", None),
        ("nu", Some("0.5")),
        ("d", None),
        ("M", Some("100000")),
        ("estimators", Some("covnet")),
        ("model", None),
        ("input", None),
        ("dense_cap", Some("4096")),
        ("output", Some("errors.csv")),
    ],
};

pub const EXPORT: Schema = Schema {
    command: "export",
    keys: &[
        ("model", None),
        ("K", Some("25")),
        ("v0", None),
        ("output", Some("kernel_slice.csv")),
    ],
};

pub fn schema(command: &str) -> Option<&'static Schema> {
    match command {
        "simulate" => Some(&SIMULATE),
        "fit" => Some(&FIT),
        "cv" => Some(&CV),
        "eigen" => Some(&EIGEN),
        "eval" => Some(&EVAL),
        "export" => Some(&EXPORT),
        _ => None,
    }
}

/// Resolves the configuration of `command` and runs it; returns a short
/// human-readable summary.
pub fn run(command: &str, ov: &Overrides) -> Result<String> {
    let schema =
        schema(command).ok_or_else(|| Error::Config(format!("unknown subcommand `{command}`")))?;
    let cfg = Config::resolve(schema, ov)?;
    cfg.seed()?;
    cfg.write_resolved()?;
    match command {
        "simulate" => run_simulate(&cfg),
        "fit" => run_fit(&cfg),
        "cv" => run_cv(&cfg),
        "eigen" => run_eigen(&cfg),
        "eval" => run_eval(&cfg),
        _ => run_export(&cfg),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn prepare(path: &Path) -> Result<()> {
    ensure_parent(path)
}

pub fn kernel_from_config(cfg: &Config, name_key: &str, d: usize) -> Result<KernelSpec> {
    let name = cfg.require(name_key)?;
    let rotation = || {
        standard_rotation(d).map_err(|_| {
            Error::Config(format!(
                "`{name_key} = {name}` needs d = 2 or d = 3, got d = {d}"
            ))
        })
    };
    let spec = match name {
        "brownian" => KernelSpec::BrownianSheet,
        "rotated_brownian" => KernelSpec::RotatedBrownianSheet(rotation()?),
        "integrated_brownian" => KernelSpec::IntegratedBrownianSheet,
        "rotated_integrated_brownian" => KernelSpec::RotatedIntegratedBrownianSheet(rotation()?),
        "matern" => {
            let nu = cfg.real("nu")?;
            if nu <= 0.0 {
                return Err(Error::Config(format!("key `nu` must be positive, got {nu}")));
            }
            KernelSpec::Matern { nu }
        }
        other => {
            return Err(Error::Config(format!(
                "unknown {name_key} `{other}` (expected brownian, rotated_brownian, integrated_brownian, \
                 rotated_integrated_brownian or matern)"
            )))
        }
    };
    Ok(spec)
}

pub fn run_simulate(cfg: &Config) -> Result<String> {
    let d = cfg.positive("d")?;
    let k = cfg.positive("K")?;
    let n = cfg.positive("N")?;
    let seed = cfg.seed()?;
    let spec = kernel_from_config(cfg, "kernel", d)?;
    let sigma = cfg.real("noise_sigma")?;
    if sigma < 0.0 {
        return Err(Error::Config(format!(
            "key `noise_sigma` must be >= 0, got {sigma}"
        )));
    }
    let noise_seed = match cfg.parse::<u64>("noise_seed")? {
        Some(s) => s,
        None => mix_seed(seed, &[1]),
    };
    let noise = (sigma > 0.0)
        .then(|| NoiseSpec::new(sigma, noise_seed))
        .transpose()?;
    let grid = Grid::cube(d, k)?;
    let cap = cfg.positive("kernel_cap")?;
    let fields = sample_gaussian_fields(&spec, &grid, n, seed, noise.as_ref(), cap)?;
    let path = cfg.out_path("output")?;
    prepare(&path)?;
    write_fields(&path, &fields)?;
    let mut meta = String::new();
    writeln!(meta, "kernel = {}", cfg.require("kernel")?).unwrap();
    if matches!(spec, KernelSpec::Matern { .. }) {
        writeln!(meta, "nu = {}", cfg.require("nu")?).unwrap();
    }
    writeln!(
        meta,
        "d = {d}\nK = {k}\nN = {n}\nD = {}\nseed = {seed}",
        grid.len()
    )
    .unwrap();
    writeln!(meta, "noise_sigma = {sigma}").unwrap();
    if sigma > 0.0 {
        writeln!(meta, "noise_seed = {noise_seed}").unwrap();
    }
    let meta_path = path.with_file_name(format!(
        "{}.meta",
        path.file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    ));
    write_text(&meta_path, &meta)?;
    Ok(format!(
        "wrote {} fields on {} points to {}",
        n,
        grid.len(),
        path.display()
    ))
}

pub fn arch_from_config(cfg: &Config, d: usize) -> Result<Architecture> {
    let name = cfg.require("arch")?;
    let kind = ArchKind::parse(name).ok_or_else(|| {
        Error::Config(format!(
            "unknown arch `{name}` (expected shallow, deep or deepshared)"
        ))
    })?;
    let r = cfg.positive("R")?;
    let arch = match kind {
        ArchKind::Shallow => {
            if cfg.get("L").is_some() {
                return Err(Error::Config(
                    "key `L` does not apply to arch = shallow".into(),
                ));
            }
            Architecture::shallow(r, d)?
        }
        ArchKind::Deep | ArchKind::DeepShared => {
            if cfg.get("L").is_none() {
                return Err(Error::Config(format!("arch = {name} requires key `L`")));
            }
            let l = cfg.positive("L")?;
            Architecture::new(kind, r, d, vec![r; l])?
        }
    };
    Ok(arch)
}

pub fn train_config_from(cfg: &Config) -> Result<TrainConfig> {
    let mode = cfg.require("center_mode")?;
    let center_mode = CenterMode::parse(mode).ok_or_else(|| {
        Error::Config(format!(
            "unknown center_mode `{mode}` (expected pre_center or joint_mean)"
        ))
    })?;
    let tc = TrainConfig {
        epochs: cfg.parse_required("epochs")?,
        lr: cfg.real("lr")?,
        beta1: cfg.real("beta1")?,
        beta2: cfg.real("beta2")?,
        eps: cfg.real("eps")?,
        rel_tol: cfg.real("rel_tol")?,
        window: cfg.positive("window")?,
        seed: cfg.seed()?,
        center_mode,
        batch: cfg.positive_opt("batch")?,
    };
    tc.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(tc)
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut s = String::with_capacity(64 * (rows.len() + 1));
    s.push_str(header);
    s.push('\n');
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    write_text(path, &s)
}

pub fn run_fit(cfg: &Config) -> Result<String> {
    let input = cfg.require("input")?;
    let fields = read_fields(Path::new(input))?;
    let arch = arch_from_config(cfg, fields.grid().dim())?;
    let tc = train_config_from(cfg)?;
    let out = fit(&fields, &arch, &tc)?;
    let model_path = cfg.out_path("output")?;
    prepare(&model_path)?;
    save_model(&model_path, &out.model)?;
    let rows: Vec<String> = out
        .trace
        .iter()
        .enumerate()
        .map(|(e, l)| {
            format!(
                "{e},{},{},{},{}",
                fmt_f64(l.total),
                fmt_f64(l.term_xx),
                fmt_f64(l.term_gg),
                fmt_f64(l.term_xg)
            )
        })
        .collect();
    write_csv(
        &cfg.out_path("trace")?,
        "epoch,total,term_xx,term_gg,term_xg",
        &rows,
    )?;
    let first = out.trace.first().map_or(f64::NAN, |l| l.total);
    let best = out.trace[out.best_epoch].total;
    Ok(format!(
        "fitted {} over {} epochs: loss {} -> {} (epoch {}); model written to {}",
        arch.label(),
        out.trace.len(),
        fmt_f64(first),
        fmt_f64(best),
        out.best_epoch,
        model_path.display()
    ))
}

/// Parses `shallow:R`, `deep:L:R` and `deepshared:L:R` items.
pub fn parse_candidates(list: &str, d: usize, tc: &TrainConfig) -> Result<Vec<Candidate>> {
    let bad = |item: &str| {
        Error::Config(format!(
            "bad candidate `{item}` (expected shallow:R, deep:L:R or deepshared:L:R)"
        ))
    };
    let mut out = Vec::new();
    for item in split_list(list) {
        let parts: Vec<&str> = item.split(':').map(str::trim).collect();
        let num = |s: &str| {
            s.parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| bad(item))
        };
        let arch = match (ArchKind::parse(parts[0]), parts.len()) {
            (Some(ArchKind::Shallow), 2) => Architecture::shallow(num(parts[1])?, d)?,
            (Some(kind @ (ArchKind::Deep | ArchKind::DeepShared)), 3) => {
                let (l, r) = (num(parts[1])?, num(parts[2])?);
                Architecture::new(kind, r, d, vec![r; l])?
            }
            _ => return Err(bad(item)),
        };
        out.push(Candidate {
            arch,
            config: tc.clone(),
        });
    }
    if out.is_empty() {
        return Err(Error::Config("key `candidates` lists no candidates".into()));
    }
    Ok(out)
}

pub fn run_cv(cfg: &Config) -> Result<String> {
    let fields = read_fields(Path::new(cfg.require("input")?))?;
    let d = fields.grid().dim();
    let tc = train_config_from(cfg)?;
    let candidates = match cfg.get("candidates") {
        Some(list) => parse_candidates(list, d, &tc)?,
        None => default_candidates(d, &tc)?,
    };
    let folds = cfg.positive("folds")?;
    let seed = cfg.seed()?;
    let report = cross_validate_parallel(&fields, &candidates, folds, seed, threads_from_env()?)?;
    let mut rows = Vec::new();
    for (c, cand) in report.candidates.iter().enumerate() {
        let label = cand.arch.label();
        let params = cand.arch.total_parameter_count();
        let sel = c == report.selected;
        match report.mean_losses[c] {
            Some(mean) => {
                for (k, l) in report.fold_losses[c].iter().enumerate() {
                    rows.push(format!("{c},{label},{params},{k},{},{sel}", fmt_f64(*l)));
                }
                rows.push(format!("{c},{label},{params},mean,{},{sel}", fmt_f64(mean)));
            }
            None => rows.push(format!("{c},{label},{params},failed,,false")),
        }
    }
    write_csv(
        &cfg.out_path("report")?,
        "candidate,label,parameters,fold,loss,selected",
        &rows,
    )?;
    let chosen = &report.candidates[report.selected];
    let refit = fit(&fields, &chosen.arch, &tc)?;
    let model_path = cfg.out_path("output")?;
    prepare(&model_path)?;
    save_model(&model_path, &refit.model)?;
    Ok(format!(
        "selected candidate {} ({}) with mean CV loss {}; refitted model written to {}",
        report.selected,
        chosen.arch.label(),
        fmt_f64(report.mean_losses[report.selected].unwrap_or(f64::NAN)),
        model_path.display()
    ))
}

fn cube_grid(cfg: &Config, key: &str, d: usize) -> Result<Grid> {
    Ok(Grid::cube(d, cfg.positive(key)?)?)
}

fn point_row(i: usize, coords: &[f64], value: f64) -> String {
    let mut s = i.to_string();
    for c in coords {
        s.push(',');
        s.push_str(&fmt_f64(*c));
    }
    s.push(',');
    s.push_str(&fmt_f64(value));
    s
}

fn coord_header(d: usize) -> String {
    let mut h = String::from("index");
    for a in 1..=d {
        write!(h, ",u{a}").unwrap();
    }
    h.push_str(",value");
    h
}

pub fn run_eigen(cfg: &Config) -> Result<String> {
    let mut model = load_model(Path::new(cfg.require("model")?))?;
    let m = cfg.positive("M")?;
    let seed = cfg.seed()?;
    if let Some(t) = cfg.parse::<f64>("threshold")? {
        if t.is_nan() || t <= 0.0 {
            return Err(Error::Config(format!(
                "key `threshold` must be positive, got {t}"
            )));
        }
        model = threshold_lambda(&model, t)?;
        let p = cfg.out_path("thresholded")?;
        prepare(&p)?;
        save_model(&p, &model)?;
    }
    let gram = constituent_gram(&model, m, seed)?;
    let es = eigendecompose(&model, &gram)?;
    let rows: Vec<String> = es
        .eigenvalues
        .iter()
        .enumerate()
        .map(|(i, e)| format!("{i},{}", fmt_f64(*e)))
        .collect();
    write_csv(&cfg.out_path("eigenvalues")?, "index,eigenvalue", &rows)?;
    let mut written = 0;
    if cfg.get("K").is_some() {
        let d = model.architecture().d();
        let grid = cube_grid(cfg, "K", d)?;
        let pts = grid.coordinates();
        let count = cfg.positive_opt("count")?.unwrap_or(es.rank).min(es.rank);
        let prefix = cfg.require("eigenfunctions")?;
        for i in 0..count {
            let psi = eval_eigenfunction(&model, &es, i, &pts)?;
            let rows: Vec<String> = (0..grid.len())
                .map(|j| point_row(j, &grid.coordinate(j), psi[j]))
                .collect();
            write_csv(
                &cfg.out_dir().join(format!("{prefix}_{i}.csv")),
                &coord_header(d),
                &rows,
            )?;
        }
        written = count;
    }
    Ok(format!(
        "rank {}; leading eigenvalue {}; {} eigenfunction files",
        es.rank,
        fmt_f64(es.eigenvalues.get(0).copied().unwrap_or(0.0)),
        written
    ))
}

pub const SEPARABLE_LABEL: &str = "best_separable_nkp";

pub fn run_eval(cfg: &Config) -> Result<String> {
    let estimators = split_list(cfg.require("estimators")?);
    if estimators.is_empty() {
        return Err(Error::Config("key `estimators` is empty".into()));
    }
    let needs_model = estimators.contains(&"covnet");
    let needs_fields = estimators
        .iter()
        .any(|e| *e == "empirical" || *e == SEPARABLE_LABEL);
    let model = if needs_model {
        Some(load_model(Path::new(cfg.require("model")?))?)
    } else {
        None
    };
    let fields = if needs_fields {
        Some(read_fields(Path::new(cfg.require("input")?))?.centered())
    } else {
        None
    };
    let inferred = model
        .as_ref()
        .map(|m| m.architecture().d())
        .or_else(|| fields.as_ref().map(|f| f.grid().dim()));
    let d = match (cfg.parse::<usize>("d")?, inferred) {
        (Some(d), _) | (None, Some(d)) => d,
        (None, None) => {
            return Err(Error::Config(
                "key `d` is required when no model or input is given".into(),
            ))
        }
    };
    if d == 0 {
        return Err(Error::Config("key `d` must be positive".into()));
    }
    let truth = kernel_from_config(cfg, "truth", d)?;
    if let Some(m) = &model {
        if m.architecture().d() != d {
            return Err(Error::Config(format!(
                "model is {}-dimensional but truth uses d = {d}",
                m.architecture().d()
            )));
        }
    }
    if let Some(f) = &fields {
        if f.grid().dim() != d {
            return Err(Error::Config(format!(
                "input fields are {}-dimensional but truth uses d = {d}",
                f.grid().dim()
            )));
        }
    }
    let m = cfg.positive("M")?;
    let seed = cfg.seed()?;
    let cap = cfg.positive("dense_cap")?;
    let empirical = match &fields {
        Some(f) => Some(empirical_covariance(f, cap)?),
        None => None,
    };
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for name in estimators {
        let separable;
        let est: &dyn CovarianceKernel = match name {
            "covnet" => model.as_ref().expect("model loaded"),
            "empirical" => empirical.as_ref().expect("fields loaded"),
            SEPARABLE_LABEL => {
                separable = best_separable_2d(empirical.as_ref().expect("fields loaded"))?;
                &separable
            }
            "zero" => &ZeroKernel,
            other => {
                return Err(Error::Config(format!(
                    "unknown estimator `{other}` (expected covnet, empirical, {SEPARABLE_LABEL} or zero)"
                )))
            }
        };
        let err = relative_error_mc(est, &truth, d, m, seed)?;
        rows.push(format!("{name},{},{m},{seed}", fmt_f64(err)));
        summary.push(format!("{name}={err:.4}"));
    }
    write_csv(
        &cfg.out_path("output")?,
        "estimator,relative_error,M,seed",
        &rows,
    )?;
    Ok(format!("relative errors: {}", summary.join(" ")))
}

pub fn run_export(cfg: &Config) -> Result<String> {
    let model: FittedCovariance = load_model(Path::new(cfg.require("model")?))?;
    let d = model.architecture().d();
    let grid = cube_grid(cfg, "K", d)?;
    let v0: Vec<f64> = match cfg.get("v0") {
        None => vec![0.5; d],
        Some(s) => split_list(s)
            .iter()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::Config(format!("invalid coordinate `{t}` in key `v0`")))
            })
            .collect::<Result<_>>()?,
    };
    if v0.len() != d || v0.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(Error::Config(format!(
            "key `v0` must list {d} coordinates in [0, 1]"
        )));
    }
    let us = grid.coordinates();
    let vs = DMatrix::from_fn(grid.len(), d, |_, j| v0[j]);
    let values = model.kernel_pairs(&us, &vs)?;
    let rows: Vec<String> = (0..grid.len())
        .map(|i| point_row(i, &grid.coordinate(i), values[i]))
        .collect();
    let path = cfg.out_path("output")?;
    write_csv(&path, &coord_header(d), &rows)?;
    Ok(format!(
        "wrote {} kernel values to {}",
        rows.len(),
        path.display()
    ))
}
