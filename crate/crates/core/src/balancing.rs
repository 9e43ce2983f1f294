//! Kernel balancing: calibrate on the leading singular vectors of the kernel
//! matrix, choosing how many by minimizing the worst-case bias bound.

use std::collections::{BTreeMap, HashMap};

use faer::Mat;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{
    self, entropy_balance, CalibrationProblem, WeightSolution, DEFAULT_MAX_ITERATIONS, DEFAULT_TOLERANCE,
};
use crate::dataset::{one_hot, strata_labels, ColumnData, Dataset};
use crate::error::{KpopError, Result};
use crate::estimation::{weighted_mean, EstimateResult};
use crate::kernel::{distance_histogram, make_kernel, select_bandwidth, KernelMatrix, DEFAULT_SEARCH_INTERVAL};
use crate::spectral::{thin_svd, SpectralDecomposition, DEFAULT_SVD_FLOOR};

pub const DEFAULT_MAX_DIMS_CAP: usize = 500;
pub const DEFAULT_INCREMENT: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KpopConfig {
    /// Kernel bandwidth; variance-maximizing when absent.
    pub b: Option<f64>,
    pub b_multiplier: f64,
    pub min_dims: usize,
    /// Defaults to `min(500, rank)`.
    pub max_dims: Option<usize>,
    pub increment: usize,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub mean_first_vars: Vec<String>,
    pub require_convergence: bool,
    pub svd_floor: f64,
    pub bandwidth_interval: (f64, f64),
}

impl Default for KpopConfig {
    fn default() -> Self {
        KpopConfig {
            b: None,
            b_multiplier: 1.0,
            min_dims: 1,
            max_dims: None,
            increment: DEFAULT_INCREMENT,
            tolerance: DEFAULT_TOLERANCE,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            mean_first_vars: Vec::new(),
            require_convergence: false,
            svd_floor: DEFAULT_SVD_FLOOR,
            bandwidth_interval: DEFAULT_SEARCH_INTERVAL,
        }
    }
}

impl KpopConfig {
    /// Grid settings used for the large survey application: r from 140 to
    /// 500 in steps of 5.
    pub fn survey_preset() -> Self {
        KpopConfig {
            min_dims: 140,
            max_dims: Some(500),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(KpopError::InvalidConfig(msg.to_string()));
        if let Some(b) = self.b {
            if !(b > 0.0 && b.is_finite()) {
                return Err(KpopError::InvalidBandwidth(b));
            }
        }
        if !(self.b_multiplier > 0.0 && self.b_multiplier.is_finite()) {
            return bad("b_multiplier must be positive");
        }
        if self.min_dims < 1 {
            return bad("min_dims must be at least 1");
        }
        if self.increment < 1 {
            return bad("increment must be at least 1");
        }
        if let Some(max) = self.max_dims {
            if max < self.min_dims {
                return bad("max_dims must be at least min_dims");
            }
        }
        if !(self.tolerance > 0.0) {
            return bad("tolerance must be positive");
        }
        if !(self.svd_floor >= 0.0 && self.svd_floor < 1.0) {
            return bad("svd_floor must lie in [0, 1)");
        }
        let (lo, hi) = self.bandwidth_interval;
        if !(lo > 0.0 && hi > lo && hi.is_finite()) {
            return bad("bandwidth interval must satisfy 0 < lo < hi");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BiasBound {
    /// `‖(pop_wᵀV_pop − wᵀV_s) ⊙ √A‖₂`, function-norm factor set to 1.
    pub value: f64,
    pub per_dimension_imbalance: Vec<f64>,
    pub includes_all_columns: bool,
}

pub fn bias_bound(dec: &SpectralDecomposition, w: &[f64], pop_w: &[f64]) -> Result<BiasBound> {
    let target = dec.population_means(pop_w);
    bias_bound_with_targets(dec, &target, w, pop_w.len())
}

fn bias_bound_with_targets(dec: &SpectralDecomposition, target: &[f64], w: &[f64], n_pop: usize) -> Result<BiasBound> {
    let n_s = dec.split_index;
    if w.len() != n_s || n_pop != dec.v.nrows() - n_s {
        return Err(KpopError::DimensionMismatch(format!(
            "weights ({}, {}) against decomposition ({n_s}, {})",
            w.len(),
            n_pop,
            dec.v.nrows() - n_s
        )));
    }
    let achieved = dec.sample_means(w);
    let imbalance: Vec<f64> = target.iter().zip(&achieved).map(|(t, a)| t - a).collect();
    let value = imbalance
        .iter()
        .zip(&dec.singular_values)
        .map(|(d, a)| d * d * a)
        .sum::<f64>()
        .sqrt();
    Ok(BiasBound {
        value,
        per_dimension_imbalance: imbalance,
        includes_all_columns: true,
    })
}

/// Exact-balance margins appended ahead of the singular vectors.
#[derive(Clone, Debug)]
pub struct MeanFirst {
    /// `N_s × k`, standardized.
    pub sample: Mat<f64>,
    pub targets: Vec<f64>,
    pub names: Vec<String>,
}

/// Margin columns for `vars` (one-hot without the last level for
/// categoricals, raw values for numerics), standardized over the stacked
/// sample and population rows. Columns constant over those rows are dropped.
pub fn mean_first_columns(ds: &Dataset, vars: &[String]) -> Result<MeanFirst> {
    let s_rows = ds.sample_rows();
    let p_rows = ds.population_rows();
    let pw = ds.pop_weights();
    let mut raw: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    for name in vars {
        match &ds.variable(name)?.data {
            ColumnData::Categorical { .. } => {
                let mc = calibration::margin_constraints(ds, std::slice::from_ref(name))?;
                for (j, col) in mc.names.into_iter().enumerate() {
                    raw.push((
                        col,
                        mc.sample.col(j).iter().copied().collect(),
                        mc.population.col(j).iter().copied().collect(),
                    ));
                }
            }
            ColumnData::Numeric(values) => raw.push((
                name.clone(),
                s_rows.iter().map(|&r| values[r]).collect(),
                p_rows.iter().map(|&r| values[r]).collect(),
            )),
        }
    }
    let mut names = Vec::new();
    let mut cols = Vec::new();
    let mut targets = Vec::new();
    for (name, s, p) in raw {
        let n = (s.len() + p.len()) as f64;
        let mean = s.iter().chain(&p).sum::<f64>() / n;
        let var = s.iter().chain(&p).map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        if var <= 0.0 {
            continue;
        }
        let sd = var.sqrt();
        targets.push(p.iter().zip(pw).map(|(v, w)| w * (v - mean) / sd).sum());
        cols.push(s.iter().map(|v| (v - mean) / sd).collect::<Vec<f64>>());
        names.push(name);
    }
    Ok(MeanFirst {
        sample: Mat::from_fn(s_rows.len(), cols.len(), |i, j| cols[j][i]),
        targets,
        names,
    })
}

/// Constraints `[mean-first | V_s[:, ..r]]` with targets
/// `[margin targets | pop_wᵀV_pop[:, ..r]]`.
pub fn build_constraints(
    dec: &SpectralDecomposition,
    r: usize,
    mean_first: Option<&MeanFirst>,
    pop_w: &[f64],
    base_weights: &[f64],
) -> Result<CalibrationProblem> {
    let targets = dec.population_means(pop_w);
    build_with_targets(dec, r, mean_first, &targets, base_weights)
}

fn build_with_targets(
    dec: &SpectralDecomposition,
    r: usize,
    mean_first: Option<&MeanFirst>,
    v_targets: &[f64],
    base_weights: &[f64],
) -> Result<CalibrationProblem> {
    if r > dec.rank() {
        return Err(KpopError::InvalidConfig(format!("r = {r} exceeds kernel rank {}", dec.rank())));
    }
    let k = mean_first.map_or(0, |mf| mf.targets.len());
    let vs = dec.v_sample();
    let a = Mat::from_fn(dec.split_index, k + r, |i, j| {
        if j < k {
            mean_first.unwrap().sample[(i, j)]
        } else {
            vs[(i, j - k)]
        }
    });
    let mut targets = mean_first.map_or_else(Vec::new, |mf| mf.targets.clone());
    targets.extend_from_slice(&v_targets[..r]);
    CalibrationProblem::new(a, targets, base_weights.to_vec())
}

/// Mean absolute gap between population and weighted-sample kernel column
/// means.
pub fn l1_imbalance(k: &KernelMatrix, w: &[f64], pop_w: &[f64]) -> Result<f64> {
    if w.len() != k.n_sample() || pop_w.len() != k.n_population() {
        return Err(KpopError::DimensionMismatch(format!(
            "weights ({}, {}) against kernel ({}, {})",
            w.len(),
            pop_w.len(),
            k.n_sample(),
            k.n_population()
        )));
    }
    let s = k.sample_column_means(w);
    let p = k.population_column_means(pop_w);
    Ok(s.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum::<f64>() / k.n_bases() as f64)
}

/// `before / after`, taken as 1 when both bounds are exactly 0.
pub fn bound_ratio(before: f64, after: f64) -> f64 {
    if before == 0.0 && after == 0.0 {
        1.0
    } else {
        before / after
    }
}

pub fn ess(w: &[f64]) -> f64 {
    let s: f64 = w.iter().sum();
    s * s / w.iter().map(|x| x * x).sum::<f64>()
}

/// Fewest units whose weights sum to at least 90% of the total.
pub fn n_to_90pct(w: &[f64]) -> usize {
    let total: f64 = w.iter().sum();
    let mut sorted = w.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    for (i, x) in sorted.iter().enumerate() {
        acc += x;
        if acc >= 0.9 * total - 1e-12 {
            return i + 1;
        }
    }
    w.len()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MarginRow {
    /// Variable name, or names joined by `*` for an interaction.
    pub variable: String,
    /// `Σ p_pop · |p̂_w − p_pop| × 100`.
    pub error_pp: f64,
}

/// Population-share-weighted absolute error of the weighted sample
/// distribution, in percentage points, for each variable group.
pub fn margin_error_table(ds: &Dataset, specs: &[Vec<String>], w: &[f64]) -> Result<Vec<MarginRow>> {
    if w.len() != ds.n_sample() {
        return Err(KpopError::DimensionMismatch(format!(
            "{} weights for {} sampled units",
            w.len(),
            ds.n_sample()
        )));
    }
    let total: f64 = w.iter().sum();
    let n_s = ds.n_sample();
    specs
        .iter()
        .map(|spec| {
            let keys = strata_labels(ds, spec)?;
            let mut pop: BTreeMap<&str, f64> = BTreeMap::new();
            let mut smp: HashMap<&str, f64> = HashMap::new();
            for (k, wi) in keys[..n_s].iter().zip(w) {
                *smp.entry(k.as_str()).or_insert(0.0) += wi / total;
            }
            for (k, pi) in keys[n_s..].iter().zip(ds.pop_weights()) {
                *pop.entry(k.as_str()).or_insert(0.0) += pi;
            }
            let err: f64 = pop
                .iter()
                .map(|(k, p)| p * (smp.get(k).copied().unwrap_or(0.0) - p).abs())
                .sum();
            Ok(MarginRow {
                variable: spec.join("*"),
                error_pp: 100.0 * err,
            })
        })
        .collect()
}

/// Each variable on its own, then every pair of categorical variables.
pub fn default_margin_specs(ds: &Dataset, vars: &[String]) -> Result<Vec<Vec<String>>> {
    let mut specs: Vec<Vec<String>> = Vec::new();
    let mut cats = Vec::new();
    for v in vars {
        if ds.variable(v)?.is_categorical() {
            specs.push(vec![v.clone()]);
            cats.push(v.clone());
        }
    }
    for i in 0..cats.len() {
        for j in (i + 1)..cats.len() {
            specs.push(vec![cats[i].clone(), cats[j].clone()]);
        }
    }
    Ok(specs)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridPoint {
    pub r: usize,
    pub bias_bound: f64,
    pub converged: bool,
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct KpopReport {
    pub weights: WeightSolution,
    pub chosen_r: usize,
    pub mean_first_dims: usize,
    pub mean_first_columns: Vec<String>,
    pub bias_bound_before: f64,
    pub bias_bound_after: f64,
    /// `before / after`; infinite (null in JSON) when only the weighted
    /// bound reaches 0, and 1 when both do.
    pub bias_bound_ratio: f64,
    pub l1_before: f64,
    pub l1_after: f64,
    pub ess: f64,
    pub n_to_90pct: usize,
    pub margin_table: Vec<MarginRow>,
    pub bandwidth: f64,
    pub rank: usize,
    /// Set when `require_convergence` found no converged grid point.
    pub no_converged_candidate: bool,
    pub grid: Vec<GridPoint>,
    pub estimate: Option<EstimateResult>,
}

/// Kernel and decomposition for `vars`, built once and reusable across
/// grid settings.
pub struct KernelBasis {
    pub kernel: KernelMatrix,
    pub decomposition: SpectralDecomposition,
}

pub fn kernel_basis(ds: &Dataset, vars: &[String], cfg: &KpopConfig) -> Result<KernelBasis> {
    cfg.validate()?;
    let design = one_hot(ds, vars)?;
    let b = match cfg.b {
        Some(b) => b,
        None => select_bandwidth(&distance_histogram(&design)?, cfg.bandwidth_interval)?,
    } * cfg.b_multiplier;
    log::info!("bandwidth {b}");
    let kernel = make_kernel(&design, b)?;
    drop(design);
    basis_from_kernel(kernel, cfg)
}

pub fn basis_from_kernel(kernel: KernelMatrix, cfg: &KpopConfig) -> Result<KernelBasis> {
    let decomposition = thin_svd(&kernel, cfg.svd_floor)?;
    log::info!("kernel rank {}", decomposition.rank());
    Ok(KernelBasis { kernel, decomposition })
}

/// The r values visited: `min_dims, min_dims + increment, …` up to
/// `max_dims` (default `min(500, rank)`), clamped to the rank.
pub fn r_grid(cfg: &KpopConfig, rank: usize) -> Result<Vec<usize>> {
    let max = cfg.max_dims.unwrap_or(DEFAULT_MAX_DIMS_CAP.min(rank));
    if max > rank {
        log::warn!("max_dims {max} exceeds kernel rank {rank}; clamped");
    }
    let max = max.min(rank);
    let grid: Vec<usize> = (cfg.min_dims..=max).step_by(cfg.increment).collect();
    if grid.is_empty() {
        return Err(KpopError::InvalidConfig(format!(
            "empty r grid: min_dims {} above usable maximum {max}",
            cfg.min_dims
        )));
    }
    Ok(grid)
}

pub fn solve(ds: &Dataset, vars: &[String], cfg: &KpopConfig) -> Result<KpopReport> {
    if vars.is_empty() {
        return Err(KpopError::InvalidConfig("no balancing variables".into()));
    }
    let basis = kernel_basis(ds, vars, cfg)?;
    solve_with_basis(ds, vars, &basis, cfg)
}

pub fn solve_with_basis(ds: &Dataset, vars: &[String], basis: &KernelBasis, cfg: &KpopConfig) -> Result<KpopReport> {
    cfg.validate()?;
    let dec = &basis.decomposition;
    let q = ds.base_weights();
    let pop_w = ds.pop_weights();
    if dec.split_index != ds.n_sample() || dec.v.nrows() != ds.n_rows() {
        return Err(KpopError::DimensionMismatch("kernel does not match dataset".into()));
    }
    let mean_first = if cfg.mean_first_vars.is_empty() {
        None
    } else {
        Some(mean_first_columns(ds, &cfg.mean_first_vars)?)
    };
    let v_targets = dec.population_means(pop_w);
    let grid = r_grid(cfg, dec.rank())?;

    let solved: Vec<(GridPoint, WeightSolution)> = grid
        .par_iter()
        .map(|&r| {
            let prob = build_with_targets(dec, r, mean_first.as_ref(), &v_targets, q)?
                .with_limits(cfg.tolerance, cfg.max_iterations)?;
            let sol = entropy_balance(&prob)?;
            let bound = bias_bound_with_targets(dec, &v_targets, &sol.weights, pop_w.len())?;
            log::debug!("r={r} bound={} converged={}", bound.value, sol.converged);
            Ok((
                GridPoint {
                    r,
                    bias_bound: bound.value,
                    converged: sol.converged,
                    residual: sol.residual,
                    iterations: sol.iterations,
                },
                sol,
            ))
        })
        .collect::<Result<_>>()?;

    let pick = |only_converged: bool| {
        solved
            .iter()
            .enumerate()
            .filter(|(_, (g, _))| !only_converged || g.converged)
            .min_by(|(_, (a, _)), (_, (b, _))| a.bias_bound.total_cmp(&b.bias_bound).then(a.r.cmp(&b.r)))
            .map(|(i, _)| i)
    };
    let mut no_converged_candidate = false;
    let chosen = if cfg.require_convergence {
        pick(true).unwrap_or_else(|| {
            log::warn!("no grid point converged; returning best non-converged solution");
            no_converged_candidate = true;
            pick(false).unwrap()
        })
    } else {
        pick(false).unwrap()
    };
    let (point, weights) = solved[chosen].clone();
    let grid: Vec<GridPoint> = solved.into_iter().map(|(g, _)| g).collect();

    let before = bias_bound_with_targets(dec, &v_targets, q, pop_w.len())?.value;
    let after = point.bias_bound;
    let l1_before = l1_imbalance(&basis.kernel, q, pop_w)?;
    let l1_after = l1_imbalance(&basis.kernel, &weights.weights, pop_w)?;
    let specs = default_margin_specs(ds, vars)?;
    let margin_table = margin_error_table(ds, &specs, &weights.weights)?;
    let estimate = ds.outcome().map(|y| weighted_mean(y, &weights.weights)).transpose()?;

    Ok(KpopReport {
        chosen_r: point.r,
        mean_first_dims: mean_first.as_ref().map_or(0, |m| m.targets.len()),
        mean_first_columns: mean_first.map_or_else(Vec::new, |m| m.names),
        bias_bound_before: before,
        bias_bound_after: after,
        bias_bound_ratio: bound_ratio(before, after),
        l1_before,
        l1_after,
        ess: ess(&weights.weights),
        n_to_90pct: n_to_90pct(&weights.weights),
        margin_table,
        bandwidth: basis.kernel.bandwidth(),
        rank: dec.rank(),
        no_converged_candidate,
        grid,
        estimate,
        weights,
    })
}
