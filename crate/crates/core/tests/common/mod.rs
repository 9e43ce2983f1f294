#![allow(dead_code)]

use std::path::PathBuf;

use kpop::dataset::{ColumnRoles, Dataset, Variable};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn fixture_str(name: &str) -> &'static str {
    Box::leak(fixture(name).to_str().unwrap().to_string().into_boxed_str())
}

pub fn quota_roles() -> ColumnRoles {
    ColumnRoles {
        sample_col: "sample".into(),
        covariates: vec!["female".into(), "college".into()],
        continuous: vec![],
        base_weight_col: None,
        pop_weight_col: None,
        outcome_col: Some("support".into()),
    }
}

/// 8 sampled units: 3 college women, 1 woman without college, 1 college man
/// and 3 men without college, so both margins already match the population
/// of one unit per cell. Support is 0.8 for college women, 0.2 otherwise.
pub fn quota() -> Dataset {
    let f = ["1", "1", "1", "1", "0", "0", "0", "0", "1", "1", "0", "0"];
    let c = ["1", "1", "1", "0", "1", "0", "0", "0", "1", "0", "1", "0"];
    let y = vec![0.8, 0.8, 0.8, 0.2, 0.2, 0.2, 0.2, 0.2];
    Dataset::new(
        vec![
            Variable::categorical("female", &f),
            Variable::categorical("college", &c),
        ],
        (0..12).map(|i| i < 8).collect(),
        None,
        None,
        Some(y),
    )
    .unwrap()
}

pub fn quota_vars() -> Vec<String> {
    vec!["female".into(), "college".into()]
}

pub const QUOTA_POSTSTRAT: [f64; 8] = [
    2.0 / 3.0,
    2.0 / 3.0,
    2.0 / 3.0,
    2.0,
    2.0,
    2.0 / 3.0,
    2.0 / 3.0,
    2.0 / 3.0,
];

fn kl(w: &[f64], q: &[f64]) -> f64 {
    w.iter()
        .zip(q)
        .map(|(wi, qi)| if *wi > 0.0 { wi * (wi / qi).ln() } else { 0.0 })
        .sum()
}

/// Minimum of `Σ wᵢ log(wᵢ/qᵢ)` over simplex points with `Aᵀw = t`, by
/// zooming grid search over the null space of the constraints through the
/// feasible interior point `w0`. `a` is row-major `n × m`.
pub fn kl_grid_oracle(a: &[f64], n: usize, m: usize, q: &[f64], w0: &[f64]) -> f64 {
    let c = DMatrix::from_fn(m + 1, n, |r, i| if r == 0 { 1.0 } else { a[i * m + r - 1] });
    let ctc = c.transpose() * &c;
    let eig = SymmetricEigen::new(ctc);
    let top = eig.eigenvalues.iter().fold(0.0f64, |x, y| x.max(y.abs()));
    let basis: Vec<Vec<f64>> = (0..n)
        .filter(|&j| eig.eigenvalues[j].abs() <= 1e-10 * top)
        .map(|j| eig.eigenvectors.column(j).iter().copied().collect())
        .collect();
    let d = basis.len();
    let eval = |z: &[f64]| -> f64 {
        let mut w = w0.to_vec();
        for (k, b) in basis.iter().enumerate() {
            for i in 0..n {
                w[i] += z[k] * b[i];
            }
        }
        if w.iter().any(|x| *x < 0.0) {
            return f64::INFINITY;
        }
        kl(&w, q)
    };
    if d == 0 {
        return eval(&[]);
    }
    const G: usize = 11;
    let mut center = vec![0.0; d];
    let mut half = 2.0;
    let mut best = eval(&center);
    while half > 1e-8 {
        let step = 2.0 * half / (G - 1) as f64;
        let mut best_z = center.clone();
        let mut idx = vec![0usize; d];
        loop {
            let z: Vec<f64> = (0..d).map(|k| center[k] - half + idx[k] as f64 * step).collect();
            let f = eval(&z);
            if f < best {
                best = f;
                best_z = z;
            }
            let mut k = 0;
            while k < d {
                idx[k] += 1;
                if idx[k] < G {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == d {
                break;
            }
        }
        center = best_z;
        half = 3.0 * step;
    }
    best
}

/// Small calibration problem with a known interior feasible point.
pub struct OracleProblem {
    /// Row-major `n × m`.
    pub a: Vec<f64>,
    pub n: usize,
    pub m: usize,
    pub q: Vec<f64>,
    pub w0: Vec<f64>,
    pub targets: Vec<f64>,
}

/// `N_s ≤ 6`, `m ≤ 2`, targets generated by a strictly positive simplex
/// point so the constraints are feasible.
pub fn oracle_problem(seed: u64) -> OracleProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(3..=6);
    let m = rng.random_range(1..=2.min(n - 2));
    let binary = rng.random_bool(0.3);
    let a: Vec<f64> = (0..n * m)
        .map(|_| {
            if binary {
                rng.random_range(0..2) as f64
            } else {
                rng.random_range(-2.0..2.0)
            }
        })
        .collect();
    let q_raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
    let qs: f64 = q_raw.iter().sum();
    let q: Vec<f64> = q_raw.iter().map(|x| x / qs).collect();
    let w_raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let ws: f64 = w_raw.iter().sum();
    let w0: Vec<f64> = w_raw.iter().map(|x| x / ws).collect();
    let targets: Vec<f64> = (0..m).map(|j| (0..n).map(|i| w0[i] * a[i * m + j]).sum()).collect();
    OracleProblem {
        a,
        n,
        m,
        q,
        w0,
        targets,
    }
}
