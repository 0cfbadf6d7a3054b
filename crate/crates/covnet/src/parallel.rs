//! Thread-pool execution of cross-validation cells.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use covnet_core::{cross_validate_with, Candidate, CvReport, FieldMatrix};

use crate::error::{Error, Result};

pub const THREADS_ENV: &str = "COVNET_THREADS";

/// Worker count from `COVNET_THREADS` (default 1).
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!(
                "{THREADS_ENV} must be a positive integer, got `{v}`"
            ))),
        },
    }
}

/// Cross-validation with (candidate, fold) cells spread over `threads`
/// workers. Each cell is seeded independently, so the report does not
/// depend on the thread count or on completion order.
pub fn cross_validate_parallel(
    fields: &FieldMatrix,
    candidates: &[Candidate],
    v: usize,
    seed: u64,
    threads: usize,
) -> covnet_core::Result<CvReport> {
    cross_validate_with(fields, candidates, v, seed, |cell, nc, nv| {
        let total = nc * nv;
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<covnet_core::Result<f64>>>> =
            (0..total).map(|_| Mutex::new(None)).collect();
        let workers = threads.clamp(1, total.max(1));
        thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= total {
                        break;
                    }
                    let r = cell(i / nv, i % nv);
                    *slots[i].lock().expect("cell slot poisoned") = Some(r);
                });
            }
        });
        let mut flat = slots.into_iter().map(|m| {
            m.into_inner()
                .expect("cell slot poisoned")
                .expect("every cell ran")
        });
        (0..nc).map(|_| flat.by_ref().take(nv).collect()).collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use covnet_core::{cross_validate, Architecture, Grid, Stream, TrainConfig};

    #[test]
    fn parallel_matches_serial() {
        let grid = Grid::new(1, &[10]).unwrap();
        let mut s = Stream::new(3);
        let f = FieldMatrix::new(grid, 12, (0..120).map(|_| s.normal()).collect()).unwrap();
        let cands: Vec<Candidate> = [1, 2, 3]
            .iter()
            .map(|&r| Candidate {
                arch: Architecture::shallow(r, 1).unwrap(),
                config: TrainConfig {
                    epochs: 40,
                    ..TrainConfig::default()
                },
            })
            .collect();
        let a = cross_validate(&f, &cands, 3, 5).unwrap();
        let b = cross_validate_parallel(&f, &cands, 3, 5, 4).unwrap();
        assert_eq!(a, b);
    }
}
