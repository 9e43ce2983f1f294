//! Maximum-entropy calibration and the raking / post-stratification baselines.

use std::collections::HashMap;

use faer::Mat;
use serde::Serialize;

use crate::dataset::{strata_labels, ColumnData, Dataset};
use crate::error::{KpopError, Result};
use crate::linalg;

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_MAX_ITERATIONS: usize = 500;

const RIDGE: f64 = 1e-10;
const MAX_HALVINGS: usize = 50;
const ARMIJO_C: f64 = 1e-4;
/// Newton keeps going until the standardized residual drops this far below
/// the tolerance, so the returned weights do not depend on where the
/// tolerance happens to cut the iteration.
const POLISH_FACTOR: f64 = 1e-4;
/// Iterations without a 1% improvement before the solver gives up.
const STALL_WINDOW: usize = 10;
/// Columns whose sample sd is below this fraction of their magnitude are
/// rounding noise around a constant and are treated as constant.
const CONSTANT_RELATIVE_SD: f64 = 1e-10;

/// Find simplex weights `w` minimizing `Σ wᵢ log(wᵢ/qᵢ)` subject to
/// `Σ wᵢ aᵢ = t`.
#[derive(Clone, Debug)]
pub struct CalibrationProblem {
    /// `N_s × m`, one row per sampled unit.
    pub constraints: Mat<f64>,
    pub targets: Vec<f64>,
    pub base_weights: Vec<f64>,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl CalibrationProblem {
    pub fn new(constraints: Mat<f64>, targets: Vec<f64>, base_weights: Vec<f64>) -> Result<Self> {
        let p = CalibrationProblem {
            constraints,
            targets,
            base_weights,
            tolerance: DEFAULT_TOLERANCE,
            max_iterations: DEFAULT_MAX_ITERATIONS,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_limits(mut self, tolerance: f64, max_iterations: usize) -> Result<Self> {
        self.tolerance = tolerance;
        self.max_iterations = max_iterations;
        self.validate()?;
        Ok(self)
    }

    pub fn n_units(&self) -> usize {
        self.constraints.nrows()
    }

    pub fn n_constraints(&self) -> usize {
        self.constraints.ncols()
    }

    fn validate(&self) -> Result<()> {
        let (n, m) = (self.constraints.nrows(), self.constraints.ncols());
        if self.targets.len() != m {
            return Err(KpopError::DimensionMismatch(format!(
                "{} targets for {m} constraint columns",
                self.targets.len()
            )));
        }
        if self.base_weights.len() != n {
            return Err(KpopError::DimensionMismatch(format!(
                "{} base weights for {n} units",
                self.base_weights.len()
            )));
        }
        if n == 0 {
            return Err(KpopError::DimensionMismatch("no units".into()));
        }
        if self.targets.iter().any(|t| !t.is_finite()) {
            return Err(KpopError::NonFinite("calibration targets"));
        }
        if self.constraints.col_iter().any(|c| c.iter().any(|v| !v.is_finite())) {
            return Err(KpopError::NonFinite("constraint matrix"));
        }
        if self.base_weights.iter().any(|q| !(*q > 0.0 && q.is_finite())) {
            return Err(KpopError::InvalidConfig("base weights must be positive".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(KpopError::InvalidConfig("tolerance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WeightSolution {
    pub weights: Vec<f64>,
    pub converged: bool,
    /// Largest absolute gap between weighted means and targets.
    pub residual: f64,
    pub iterations: usize,
    /// `Σ wᵢ log(wᵢ/qᵢ)` against the normalized base weights.
    pub divergence: f64,
}

impl WeightSolution {
    fn from_weights(weights: Vec<f64>, q: &[f64], converged: bool, residual: f64, iterations: usize) -> Self {
        let divergence = kl_divergence(&weights, q);
        WeightSolution {
            weights,
            converged,
            residual,
            iterations,
            divergence,
        }
    }
}

pub fn kl_divergence(w: &[f64], q: &[f64]) -> f64 {
    w.iter()
        .zip(q)
        .filter(|(wi, _)| **wi > 0.0)
        .map(|(wi, qi)| wi * (wi / qi).ln())
        .sum::<f64>()
        .max(0.0)
}

/// Solves the entropy-balancing dual by damped Newton iteration.
///
/// Weights are `wᵢ ∝ qᵢ exp(-ãᵢᵀλ)` where `ã` are the constraint columns
/// centered at their targets and scaled by their sample standard deviation.
/// Columns that are constant over the sample (up to rounding) cannot move and
/// are left out of the Newton system; they still count toward the residual.
///
/// Infeasible targets or an exhausted iteration budget give
/// `converged = false` with the best iterate found.
pub fn entropy_balance(prob: &CalibrationProblem) -> Result<WeightSolution> {
    prob.validate()?;
    let n = prob.n_units();
    let m = prob.n_constraints();
    let q_sum: f64 = prob.base_weights.iter().sum();
    let q: Vec<f64> = prob.base_weights.iter().map(|x| x / q_sum).collect();
    let log_q: Vec<f64> = q.iter().map(|x| x.ln()).collect();

    let mut active = Vec::new();
    let mut scales = Vec::new();
    for j in 0..m {
        let col = prob.constraints.col(j);
        let magnitude = col.iter().fold(prob.targets[j].abs(), |a, &v| a.max(v.abs()));
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
        let sd = var.sqrt();
        if sd > CONSTANT_RELATIVE_SD * magnitude {
            active.push(j);
            scales.push(sd);
        }
    }
    let k = active.len();
    let a = Mat::<f64>::from_fn(n, k, |i, c| {
        let j = active[c];
        (prob.constraints[(i, j)] - prob.targets[j]) / scales[c]
    });

    let mut state = DualState::new(&a, &log_q, vec![0.0; k]);
    let mut best = state.clone();
    let mut since_improvement = 0usize;
    let mut last_mark = state.max_abs();
    let mut iterations = 0usize;
    let polish_tol = prob.tolerance * POLISH_FACTOR;
    let mut h = Mat::<f64>::zeros(k, k);
    let mut b = Mat::<f64>::zeros(n, k);

    while k > 0 && iterations < prob.max_iterations && state.max_abs() > polish_tol {
        // H = Ãᵀ diag(w) Ã - g gᵀ
        for c in 0..k {
            for i in 0..n {
                b[(i, c)] = a[(i, c)] * state.w[i].sqrt();
            }
        }
        linalg::tmul_seq(h.as_mut(), b.as_ref(), b.as_ref());
        for r in 0..k {
            for c in 0..k {
                h[(r, c)] -= state.g[r] * state.g[c];
            }
        }
        let Some(step) = newton_direction(&h, &state.g) else {
            break;
        };

        let norm0 = state.norm();
        let mut accepted = None;
        let mut s = 1.0;
        for _ in 0..MAX_HALVINGS {
            let lambda: Vec<f64> = state.lambda.iter().zip(&step).map(|(l, d)| l + s * d).collect();
            let trial = DualState::new(&a, &log_q, lambda);
            if trial.norm() <= (1.0 - ARMIJO_C * s) * norm0 {
                accepted = Some(trial);
                break;
            }
            s *= 0.5;
        }
        let Some(next) = accepted else {
            break;
        };
        state = next;
        iterations += 1;
        if state.max_abs() < best.max_abs() {
            best = state.clone();
        }
        if state.max_abs() < 0.99 * last_mark {
            last_mark = state.max_abs();
            since_improvement = 0;
        } else {
            since_improvement += 1;
            if since_improvement >= STALL_WINDOW {
                break;
            }
        }
    }

    let weights = best.w;
    let residual = (0..m)
        .map(|j| {
            let mean: f64 = weights.iter().enumerate().map(|(i, w)| w * prob.constraints[(i, j)]).sum();
            (mean - prob.targets[j]).abs()
        })
        .fold(0.0, f64::max);
    let converged = residual <= prob.tolerance;
    Ok(WeightSolution::from_weights(weights, &q, converged, residual, iterations))
}

fn newton_direction(h: &Mat<f64>, g: &[f64]) -> Option<Vec<f64>> {
    let k = g.len();
    let mut ridge = RIDGE;
    for _ in 0..8 {
        let mut hr = h.clone();
        for i in 0..k {
            hr[(i, i)] += ridge;
        }
        let mut d = g.to_vec();
        if linalg::cholesky_solve(&hr, &mut d) {
            return Some(d);
        }
        ridge *= 100.0;
    }
    None
}

#[derive(Clone, Debug)]
struct DualState {
    lambda: Vec<f64>,
    w: Vec<f64>,
    /// Standardized moment gap `Ãᵀw`.
    g: Vec<f64>,
}

impl DualState {
    fn new(a: &Mat<f64>, log_q: &[f64], lambda: Vec<f64>) -> Self {
        let n = a.nrows();
        let mut eta = log_q.to_vec();
        for (c, l) in lambda.iter().enumerate() {
            if *l == 0.0 {
                continue;
            }
            let col = a.col(c);
            for i in 0..n {
                eta[i] -= col[i] * l;
            }
        }
        let mx = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut w: Vec<f64> = eta.iter().map(|e| (e - mx).exp()).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= s);
        let g = (0..a.ncols())
            .map(|c| a.col(c).iter().zip(&w).map(|(x, wi)| x * wi).sum())
            .collect();
        DualState { lambda, w, g }
    }

    fn norm(&self) -> f64 {
        self.g.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    fn max_abs(&self) -> f64 {
        self.g.iter().fold(0.0, |a, x| a.max(x.abs()))
    }
}

/// One-hot constraints for `vars` with the last level of each variable
/// dropped, plus population (pop-weighted) targets.
pub(crate) struct MarginConstraints {
    /// Column-major `N_s × m` values, sample rows only.
    pub sample: Mat<f64>,
    /// Column-major `N_pop × m` values.
    pub population: Mat<f64>,
    pub targets: Vec<f64>,
    pub names: Vec<String>,
    /// Levels with population mass but no sampled unit.
    pub unsupported: Vec<String>,
}

pub(crate) fn margin_constraints(ds: &Dataset, vars: &[String]) -> Result<MarginConstraints> {
    let s_rows = ds.sample_rows();
    let p_rows = ds.population_rows();
    let pw = ds.pop_weights();
    let mut cols_s: Vec<Vec<f64>> = Vec::new();
    let mut cols_p: Vec<Vec<f64>> = Vec::new();
    let mut targets = Vec::new();
    let mut names = Vec::new();
    let mut unsupported = Vec::new();
    for name in vars {
        let ColumnData::Categorical { levels, codes } = &ds.variable(name)?.data else {
            return Err(KpopError::NotCategorical(name.clone()));
        };
        let mut sample_count = vec![0usize; levels.len()];
        let mut pop_mass = vec![0.0; levels.len()];
        for &r in s_rows {
            sample_count[codes[r] as usize] += 1;
        }
        for (pos, &r) in p_rows.iter().enumerate() {
            pop_mass[codes[r] as usize] += pw[pos];
        }
        for (l, level) in levels.iter().enumerate() {
            if sample_count[l] == 0 && pop_mass[l] > 0.0 {
                unsupported.push(format!("{name}:{level}"));
            }
        }
        for l in 0..levels.len().saturating_sub(1) {
            cols_s.push(s_rows.iter().map(|&r| (codes[r] as usize == l) as u8 as f64).collect());
            cols_p.push(p_rows.iter().map(|&r| (codes[r] as usize == l) as u8 as f64).collect());
            targets.push(pop_mass[l]);
            names.push(format!("{name}:{}", levels[l]));
        }
    }
    let m = names.len();
    Ok(MarginConstraints {
        sample: Mat::from_fn(s_rows.len(), m, |i, j| cols_s[j][i]),
        population: Mat::from_fn(p_rows.len(), m, |i, j| cols_p[j][i]),
        targets,
        names,
        unsupported,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct RakeOutcome {
    pub solution: WeightSolution,
    /// `var:level` entries with population mass but no sample support.
    pub unsupported_levels: Vec<String>,
}

/// Mean calibration on the one-hot margins of `vars`.
pub fn rake_margins(ds: &Dataset, vars: &[String]) -> Result<RakeOutcome> {
    rake_margins_with(ds, vars, DEFAULT_TOLERANCE, DEFAULT_MAX_ITERATIONS)
}

pub fn rake_margins_with(
    ds: &Dataset,
    vars: &[String],
    tolerance: f64,
    max_iterations: usize,
) -> Result<RakeOutcome> {
    let mc = margin_constraints(ds, vars)?;
    let q = ds.base_weights().to_vec();
    let mut solution = if mc.names.is_empty() {
        WeightSolution::from_weights(q.clone(), &q, true, 0.0, 0)
    } else {
        let prob = CalibrationProblem::new(mc.sample, mc.targets, q)?.with_limits(tolerance, max_iterations)?;
        entropy_balance(&prob)?
    };
    if !mc.unsupported.is_empty() {
        log::warn!("raking infeasible: no sample support for {}", mc.unsupported.join(", "));
        solution.converged = false;
    }
    Ok(RakeOutcome {
        solution,
        unsupported_levels: mc.unsupported,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DroppedStratum {
    pub key: String,
    pub population_share: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct PostStratOutcome {
    pub solution: WeightSolution,
    pub dropped: Vec<DroppedStratum>,
    /// Population mass of the dropped strata before renormalization.
    pub dropped_mass: f64,
}

/// Post-stratification on the intersection of `vars`.
///
/// Population strata without sampled units are dropped and the remaining
/// population shares renormalized. Sampled units in strata absent from the
/// population get weight zero.
pub fn post_stratify(ds: &Dataset, vars: &[String]) -> Result<PostStratOutcome> {
    let keys = strata_labels(ds, vars)?;
    let n_s = ds.n_sample();
    let (s_keys, p_keys) = keys.split_at(n_s);
    let q = ds.base_weights();
    let pw = ds.pop_weights();

    let mut sample_share: HashMap<&str, f64> = HashMap::new();
    for (k, qi) in s_keys.iter().zip(q) {
        *sample_share.entry(k.as_str()).or_insert(0.0) += qi;
    }
    let mut pop_share: HashMap<&str, f64> = HashMap::new();
    let mut pop_order: Vec<&str> = Vec::new();
    for (k, wi) in p_keys.iter().zip(pw) {
        let e = pop_share.entry(k.as_str()).or_insert_with(|| {
            pop_order.push(k.as_str());
            0.0
        });
        *e += wi;
    }

    let mut dropped = Vec::new();
    let mut kept_mass = 0.0;
    for &k in &pop_order {
        let share = pop_share[k];
        if sample_share.contains_key(k) {
            kept_mass += share;
        } else if share > 0.0 {
            dropped.push(DroppedStratum {
                key: k.to_string(),
                population_share: share,
            });
        }
    }
    if kept_mass <= 0.0 {
        return Err(KpopError::NoStratumOverlap);
    }
    let dropped_mass: f64 = dropped.iter().map(|d| d.population_share).sum();

    let mut weights: Vec<f64> = s_keys
        .iter()
        .zip(q)
        .map(|(k, qi)| match pop_share.get(k.as_str()) {
            Some(&p) if p > 0.0 => (p / kept_mass) / sample_share[k.as_str()] * qi,
            _ => 0.0,
        })
        .collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(PostStratOutcome {
        solution: WeightSolution::from_weights(weights, q, true, 0.0, 0),
        dropped,
        dropped_mass,
    })
}

/// `row_id,weight,weight_times_Ns`, one line per sampled unit.
pub fn write_weights_csv<W: std::io::Write>(ds: &Dataset, weights: &[f64], w: W) -> Result<()> {
    if weights.len() != ds.n_sample() {
        return Err(KpopError::DimensionMismatch(format!(
            "{} weights for {} sampled units",
            weights.len(),
            ds.n_sample()
        )));
    }
    let n_s = ds.n_sample() as f64;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["row_id", "weight", "weight_times_Ns"])?;
    for (&row, &wi) in ds.sample_rows().iter().zip(weights) {
        out.write_record([
            ds.row_ids()[row].to_string(),
            format!("{wi}"),
            format!("{}", wi * n_s),
        ])?;
    }
    out.flush().map_err(|e| KpopError::io("<weights csv>", e))?;
    Ok(())
}
