//! Monte-Carlo comparison of weighting estimators on synthetic populations
//! with logistic selection.

use std::collections::{BTreeMap, HashMap};

use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::balancing::{self, KpopConfig};
use crate::calibration::{self, entropy_balance, CalibrationProblem};
use crate::dataset::{ColumnData, Dataset, Variable};
use crate::error::{KpopError, Result};

pub const PI_MIN: f64 = 0.005;
pub const PI_MAX: f64 = 0.5;
const MAX_DRAW_ATTEMPTS: usize = 10;
/// Below this many replications the report carries a Monte-Carlo error note.
pub const FEW_REPLICATIONS: usize = 30;

pub const BIAS_REDUCTION_NOTE: &str =
    "bias_reduction = 1 - |bias| / |bias of the unweighted estimator|";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conditional {
    pub parent: String,
    /// Level probabilities keyed by the parent's level.
    pub probs: BTreeMap<String, Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateSpec {
    pub name: String,
    pub levels: Vec<String>,
    /// Marginal level probabilities; uniform when absent.
    #[serde(default)]
    pub probs: Option<Vec<f64>>,
    #[serde(default)]
    pub conditional: Option<Conditional>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interaction {
    /// `var:level` indicators multiplied together.
    pub terms: Vec<String>,
    pub coef: f64,
}

/// `intercept + Σ main[var:level] + Σ interactions`, plus Gaussian noise for
/// outcomes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearSpec {
    pub intercept: f64,
    #[serde(default)]
    pub main: BTreeMap<String, f64>,
    #[serde(default)]
    pub interactions: Vec<Interaction>,
    #[serde(default)]
    pub noise_sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDGP {
    pub population_size: usize,
    pub seed: u64,
    pub variables: Vec<CovariateSpec>,
    /// Logit of the inclusion probability.
    pub selection: LinearSpec,
    pub outcome: LinearSpec,
    /// Remove the mean of the outcome noise within each covariate profile,
    /// so a finite-population outcome linear in the covariates is exactly
    /// linear within profiles.
    #[serde(default)]
    pub center_noise_within_profiles: bool,
}

type Indicator = (usize, u32);

struct CompiledLinear {
    intercept: f64,
    main: Vec<(Indicator, f64)>,
    interactions: Vec<(Vec<Indicator>, f64)>,
}

impl CompiledLinear {
    fn main_part(&self, codes: &[Vec<u32>], i: usize) -> f64 {
        self.intercept
            + self
                .main
                .iter()
                .filter(|((v, l), _)| codes[*v][i] == *l)
                .map(|(_, c)| c)
                .sum::<f64>()
    }

    fn interaction_part(&self, codes: &[Vec<u32>], i: usize) -> f64 {
        self.interactions
            .iter()
            .filter(|(terms, _)| terms.iter().all(|(v, l)| codes[*v][i] == *l))
            .map(|(_, c)| c)
            .sum()
    }
}

impl SyntheticDGP {
    pub fn from_json(text: &str) -> Result<Self> {
        let dgp: SyntheticDGP = serde_json::from_str(text)?;
        dgp.validate()?;
        Ok(dgp)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(KpopError::InvalidDgp(m));
        if self.population_size < 2 {
            return bad("population_size must be at least 2".into());
        }
        if self.variables.is_empty() {
            return bad("no covariates".into());
        }
        let check_probs = |name: &str, p: &[f64], k: usize| -> Result<()> {
            if p.len() != k {
                return Err(KpopError::InvalidDgp(format!("{name}: {} probabilities for {k} levels", p.len())));
            }
            if p.iter().any(|x| !(*x >= 0.0 && x.is_finite())) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(KpopError::InvalidDgp(format!("{name}: probabilities must be non-negative and sum to 1")));
            }
            Ok(())
        };
        for (idx, v) in self.variables.iter().enumerate() {
            if v.levels.is_empty() {
                return bad(format!("{}: no levels", v.name));
            }
            if self.variables[..idx].iter().any(|o| o.name == v.name) {
                return bad(format!("duplicate variable {}", v.name));
            }
            match (&v.probs, &v.conditional) {
                (Some(_), Some(_)) => return bad(format!("{}: give probs or conditional, not both", v.name)),
                (Some(p), None) => check_probs(&v.name, p, v.levels.len())?,
                (None, Some(c)) => {
                    let Some(parent) = self.variables[..idx].iter().find(|o| o.name == c.parent) else {
                        return bad(format!("{}: parent {} must be declared earlier", v.name, c.parent));
                    };
                    for level in &parent.levels {
                        let Some(p) = c.probs.get(level) else {
                            return bad(format!("{}: no probabilities for {}={level}", v.name, c.parent));
                        };
                        check_probs(&v.name, p, v.levels.len())?;
                    }
                }
                (None, None) => {}
            }
        }
        if !(self.outcome.noise_sd >= 0.0 && self.outcome.noise_sd.is_finite()) {
            return bad("outcome noise_sd must be non-negative".into());
        }
        if self.selection.noise_sd != 0.0 {
            return bad("selection takes no noise".into());
        }
        self.compile(&self.selection)?;
        self.compile(&self.outcome)?;
        Ok(())
    }

    fn indicator(&self, term: &str) -> Result<Indicator> {
        let (var, level) = term
            .split_once(':')
            .ok_or_else(|| KpopError::InvalidDgp(format!("term {term} is not var:level")))?;
        let v = self
            .variables
            .iter()
            .position(|s| s.name == var)
            .ok_or_else(|| KpopError::InvalidDgp(format!("term {term}: unknown variable")))?;
        let l = self.variables[v]
            .levels
            .iter()
            .position(|s| s == level)
            .ok_or_else(|| KpopError::InvalidDgp(format!("term {term}: unknown level")))?;
        Ok((v, l as u32))
    }

    fn compile(&self, spec: &LinearSpec) -> Result<CompiledLinear> {
        let main = spec
            .main
            .iter()
            .map(|(t, c)| Ok((self.indicator(t)?, *c)))
            .collect::<Result<_>>()?;
        let interactions = spec
            .interactions
            .iter()
            .map(|it| {
                if it.terms.len() < 2 {
                    return Err(KpopError::InvalidDgp("interaction needs at least two terms".into()));
                }
                let terms = it.terms.iter().map(|t| self.indicator(t)).collect::<Result<_>>()?;
                Ok((terms, it.coef))
            })
            .collect::<Result<_>>()?;
        Ok(CompiledLinear {
            intercept: spec.intercept,
            main,
            interactions,
        })
    }
}

/// A finite population with its true outcomes and inclusion probabilities.
#[derive(Clone, Debug)]
pub struct SyntheticPopulation {
    pub variables: Vec<Variable>,
    pub outcome: Vec<f64>,
    pub inclusion_prob: Vec<f64>,
    /// Outcome contribution of the interaction terms, the part mean
    /// calibration on main effects cannot see.
    pub omitted: Vec<f64>,
    pub clipped_fraction: f64,
    /// Constraint columns of the selection model (main indicators and
    /// interaction products) with their names.
    selection_terms: Vec<(String, Vec<f64>)>,
}

impl SyntheticPopulation {
    pub fn len(&self) -> usize {
        self.outcome.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcome.is_empty()
    }

    pub fn mean_outcome(&self) -> f64 {
        kahan_mean(self.outcome.iter().copied())
    }

    pub fn variable_names(&self) -> Vec<String> {
        self.variables.iter().map(|v| v.name.clone()).collect()
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn draw_level(rng: &mut ChaCha8Rng, probs: &[f64]) -> u32 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (l, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return l as u32;
        }
    }
    // rounding at the top end: last level with positive mass
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0) as u32
}

pub fn generate_population(dgp: &SyntheticDGP) -> Result<SyntheticPopulation> {
    dgp.validate()?;
    let n = dgp.population_size;
    let mut rng = ChaCha8Rng::seed_from_u64(dgp.seed);
    let mut codes: Vec<Vec<u32>> = Vec::with_capacity(dgp.variables.len());
    for spec in &dgp.variables {
        let k = spec.levels.len();
        let col: Vec<u32> = match (&spec.probs, &spec.conditional) {
            (_, Some(c)) => {
                let p_idx = dgp.variables.iter().position(|o| o.name == c.parent).unwrap();
                let tables: Vec<&Vec<f64>> = dgp.variables[p_idx].levels.iter().map(|l| &c.probs[l]).collect();
                (0..n).map(|i| draw_level(&mut rng, tables[codes[p_idx][i] as usize])).collect()
            }
            (Some(p), None) => (0..n).map(|_| draw_level(&mut rng, p)).collect(),
            (None, None) => (0..n).map(|_| rng.random_range(0..k as u32)).collect(),
        };
        codes.push(col);
    }

    let sel = dgp.compile(&dgp.selection)?;
    let out = dgp.compile(&dgp.outcome)?;
    let mut clipped = 0usize;
    let inclusion_prob: Vec<f64> = (0..n)
        .map(|i| {
            let p = logistic(sel.main_part(&codes, i) + sel.interaction_part(&codes, i));
            let c = p.clamp(PI_MIN, PI_MAX);
            if c != p {
                clipped += 1;
            }
            c
        })
        .collect();
    let clipped_fraction = clipped as f64 / n as f64;
    if clipped_fraction > 0.01 {
        log::warn!("{:.1}% of inclusion probabilities clipped to [{PI_MIN}, {PI_MAX}]", 100.0 * clipped_fraction);
    }

    let normal = Normal::new(0.0, dgp.outcome.noise_sd).map_err(|e| KpopError::InvalidDgp(e.to_string()))?;
    let mut noise: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
    if dgp.center_noise_within_profiles {
        let mut groups: HashMap<Vec<u32>, (f64, usize)> = HashMap::new();
        let profile = |i: usize| codes.iter().map(|c| c[i]).collect::<Vec<u32>>();
        for (i, e) in noise.iter().enumerate() {
            let g = groups.entry(profile(i)).or_insert((0.0, 0));
            g.0 += e;
            g.1 += 1;
        }
        for (i, e) in noise.iter_mut().enumerate() {
            let (s, c) = groups[&profile(i)];
            *e -= s / c as f64;
        }
    }
    let omitted: Vec<f64> = (0..n).map(|i| out.interaction_part(&codes, i)).collect();
    let outcome: Vec<f64> = (0..n).map(|i| out.main_part(&codes, i) + omitted[i] + noise[i]).collect();

    let mut selection_terms = Vec::new();
    for name in dgp.selection.main.keys() {
        let (v, l) = dgp.indicator(name)?;
        selection_terms.push((name.clone(), (0..n).map(|i| (codes[v][i] == l) as u8 as f64).collect()));
    }
    for it in &dgp.selection.interactions {
        let terms: Vec<Indicator> = it.terms.iter().map(|t| dgp.indicator(t)).collect::<Result<_>>()?;
        let col = (0..n)
            .map(|i| terms.iter().all(|(v, l)| codes[*v][i] == *l) as u8 as f64)
            .collect();
        selection_terms.push((it.terms.join("*"), col));
    }

    let variables = dgp
        .variables
        .iter()
        .zip(codes)
        .map(|(spec, codes)| Variable {
            name: spec.name.clone(),
            data: ColumnData::Categorical {
                levels: spec.levels.clone(),
                codes,
            },
        })
        .collect();
    Ok(SyntheticPopulation {
        variables,
        outcome,
        inclusion_prob,
        omitted,
        clipped_fraction,
        selection_terms,
    })
}

/// A Bernoulli sample stacked on top of the full population it came from.
#[derive(Clone, Debug)]
pub struct DrawnSample {
    pub dataset: Dataset,
    /// Population index of each sampled unit, in sample order.
    pub sample_index: Vec<usize>,
    /// Seed that produced the accepted draw.
    pub seed: u64,
}

/// Independent Bernoulli(πᵢ) inclusion. Draws with fewer than two units are
/// retried with the next seed, up to ten attempts.
pub fn draw_sample(pop: &SyntheticPopulation, seed: u64) -> Result<DrawnSample> {
    for attempt in 0..MAX_DRAW_ATTEMPTS {
        let s = seed.wrapping_add(attempt as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let idx: Vec<usize> = pop
            .inclusion_prob
            .iter()
            .enumerate()
            .filter(|(_, p)| rng.random::<f64>() < **p)
            .map(|(i, _)| i)
            .collect();
        if idx.len() < 2 {
            log::warn!("draw with seed {s} sampled {} units; retrying", idx.len());
            continue;
        }
        return Ok(DrawnSample {
            dataset: stack(pop, &idx)?,
            sample_index: idx,
            seed: s,
        });
    }
    Err(KpopError::EmptyDraw(MAX_DRAW_ATTEMPTS))
}

fn stack(pop: &SyntheticPopulation, idx: &[usize]) -> Result<Dataset> {
    let n = pop.len();
    let variables = pop
        .variables
        .iter()
        .map(|v| {
            let ColumnData::Categorical { levels, codes } = &v.data else {
                unreachable!("synthetic covariates are categorical")
            };
            let stacked = idx.iter().copied().chain(0..n).map(|i| codes[i]).collect();
            Variable {
                name: v.name.clone(),
                data: ColumnData::Categorical {
                    levels: levels.clone(),
                    codes: stacked,
                },
            }
        })
        .collect();
    let flags = (0..idx.len() + n).map(|i| i < idx.len()).collect();
    let y = idx.iter().map(|&i| pop.outcome[i]).collect();
    Dataset::new(variables, flags, None, None, Some(y))
}

/// `Σ wᵢZᵢ` over the sample minus the population mean of `Z`.
pub fn bias_decomposition_check(pop: &SyntheticPopulation, sample_index: &[usize], w: &[f64]) -> Result<f64> {
    if sample_index.len() != w.len() {
        return Err(KpopError::DimensionMismatch(format!(
            "{} weights for {} sampled units",
            w.len(),
            sample_index.len()
        )));
    }
    let weighted: f64 = sample_index.iter().zip(w).map(|(&i, wi)| wi * pop.omitted[i]).sum();
    Ok(weighted - kahan_mean(pop.omitted.iter().copied()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EstimatorKind {
    Unweighted,
    Rake {
        vars: Vec<String>,
    },
    PostStratify {
        vars: Vec<String>,
    },
    /// Calibration on exactly the terms of the selection model.
    RakeTrueSelection,
    Kpop {
        vars: Vec<String>,
        #[serde(default)]
        config: KpopConfig,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: EstimatorKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub dgp: SyntheticDGP,
    pub estimators: Vec<EstimatorSpec>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_replications() -> usize {
    500
}

fn default_seed() -> u64 {
    1
}

impl StudyConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: StudyConfig = serde_json::from_str(text)?;
        s.dgp.validate()?;
        if s.estimators.is_empty() {
            return Err(KpopError::InvalidConfig("study lists no estimators".into()));
        }
        for (i, e) in s.estimators.iter().enumerate() {
            if s.estimators[..i].iter().any(|o| o.name == e.name) {
                return Err(KpopError::InvalidConfig(format!("duplicate estimator name {}", e.name)));
            }
            if let EstimatorKind::Kpop { config, .. } = &e.kind {
                config.validate()?;
            }
        }
        Ok(s)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| KpopError::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub estimator: String,
    pub sample_size: usize,
    pub estimate: Option<f64>,
    pub error: Option<f64>,
    pub converged: Option<bool>,
    pub failure: Option<String>,
    /// `Σ wZ` gap, see [`bias_decomposition_check`].
    pub omitted_gap: Option<f64>,
    pub bias_bound_ratio: Option<f64>,
    pub l1_before: Option<f64>,
    pub l1_after: Option<f64>,
    pub chosen_r: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EstimatorSummary {
    pub name: String,
    pub bias: f64,
    /// Standard deviation of the estimates across replications.
    pub se: f64,
    pub mse: f64,
    pub bias_reduction: Option<f64>,
    /// Monte-Carlo standard error of `bias`.
    pub mc_se: f64,
    pub successes: usize,
    pub failures: usize,
    pub nonconverged: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct SimulationReport {
    pub replications: usize,
    pub seed: u64,
    pub population_size: usize,
    pub true_mean: f64,
    pub mean_sample_size: f64,
    pub clipped_fraction: f64,
    pub rows: Vec<EstimatorSummary>,
    pub notes: Vec<String>,
    #[serde(skip)]
    pub records: Vec<ReplicationRecord>,
}

/// Seed of replication `rep`: two rounds of splitmix64 over the master seed
/// and the index, so parallel and serial runs agree.
pub fn replication_seed(master: u64, rep: usize) -> u64 {
    splitmix64(master ^ splitmix64(rep as u64 ^ 0x9e37_79b9_7f4a_7c15))
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Default)]
struct Kahan {
    sum: f64,
    c: f64,
}

impl Kahan {
    fn add(&mut self, x: f64) {
        let y = x - self.c;
        let t = self.sum + y;
        self.c = (t - self.sum) - y;
        self.sum = t;
    }
}

fn kahan_mean(xs: impl Iterator<Item = f64>) -> f64 {
    let mut k = Kahan::default();
    let mut n = 0usize;
    for x in xs {
        k.add(x);
        n += 1;
    }
    k.sum / n as f64
}

struct EstimatorOutput {
    weights: Vec<f64>,
    converged: bool,
    kpop: Option<balancing::KpopReport>,
}

fn run_estimator(pop: &SyntheticPopulation, draw: &DrawnSample, kind: &EstimatorKind) -> Result<EstimatorOutput> {
    let ds = &draw.dataset;
    let plain = |weights, converged| EstimatorOutput {
        weights,
        converged,
        kpop: None,
    };
    Ok(match kind {
        EstimatorKind::Unweighted => plain(ds.base_weights().to_vec(), true),
        EstimatorKind::Rake { vars } => {
            let out = calibration::rake_margins(ds, vars)?;
            plain(out.solution.weights, out.solution.converged)
        }
        EstimatorKind::PostStratify { vars } => plain(calibration::post_stratify(ds, vars)?.solution.weights, true),
        EstimatorKind::RakeTrueSelection => {
            let n_s = draw.sample_index.len();
            let m = pop.selection_terms.len();
            if m == 0 {
                plain(ds.base_weights().to_vec(), true)
            } else {
                let a = Mat::from_fn(n_s, m, |i, j| pop.selection_terms[j].1[draw.sample_index[i]]);
                let t = pop
                    .selection_terms
                    .iter()
                    .map(|(_, c)| kahan_mean(c.iter().copied()))
                    .collect();
                let sol = entropy_balance(&CalibrationProblem::new(a, t, ds.base_weights().to_vec())?)?;
                plain(sol.weights, sol.converged)
            }
        }
        EstimatorKind::Kpop { vars, config } => {
            let rep = balancing::solve(ds, vars, config)?;
            EstimatorOutput {
                weights: rep.weights.weights.clone(),
                converged: rep.weights.converged,
                kpop: Some(rep),
            }
        }
    })
}

fn run_replication(
    pop: &SyntheticPopulation,
    truth: f64,
    study: &StudyConfig,
    master_seed: u64,
    rep: usize,
) -> Vec<ReplicationRecord> {
    let blank = |name: &str, n: usize| ReplicationRecord {
        replication: rep,
        estimator: name.to_string(),
        sample_size: n,
        estimate: None,
        error: None,
        converged: None,
        failure: None,
        omitted_gap: None,
        bias_bound_ratio: None,
        l1_before: None,
        l1_after: None,
        chosen_r: None,
    };
    let draw = match draw_sample(pop, replication_seed(master_seed, rep)) {
        Ok(d) => d,
        Err(e) => {
            return study
                .estimators
                .iter()
                .map(|s| ReplicationRecord {
                    failure: Some(e.to_string()),
                    ..blank(&s.name, 0)
                })
                .collect()
        }
    };
    let y: Vec<f64> = draw.sample_index.iter().map(|&i| pop.outcome[i]).collect();
    let n_s = y.len();
    study
        .estimators
        .iter()
        .map(|spec| match run_estimator(pop, &draw, &spec.kind) {
            Ok(out) => {
                let est: f64 = out.weights.iter().zip(&y).map(|(w, v)| w * v).sum();
                ReplicationRecord {
                    estimate: Some(est),
                    error: Some(est - truth),
                    converged: Some(out.converged),
                    omitted_gap: bias_decomposition_check(pop, &draw.sample_index, &out.weights).ok(),
                    bias_bound_ratio: out.kpop.as_ref().map(|k| k.bias_bound_ratio),
                    l1_before: out.kpop.as_ref().map(|k| k.l1_before),
                    l1_after: out.kpop.as_ref().map(|k| k.l1_after),
                    chosen_r: out.kpop.as_ref().map(|k| k.chosen_r),
                    ..blank(&spec.name, n_s)
                }
            }
            Err(e) => {
                log::debug!("replication {rep}: {} failed: {e}", spec.name);
                ReplicationRecord {
                    failure: Some(e.to_string()),
                    ..blank(&spec.name, n_s)
                }
            }
        })
        .collect()
}

/// Runs every estimator on `replications` independent samples from one
/// synthetic population and aggregates bias, spread and MSE against the
/// finite-population mean.
pub fn run_study(study: &StudyConfig, replications: usize, master_seed: u64) -> Result<SimulationReport> {
    if replications < 2 {
        return Err(KpopError::InvalidConfig("at least 2 replications required".into()));
    }
    let pop = generate_population(&study.dgp)?;
    let truth = pop.mean_outcome();
    let per_rep: Vec<Vec<ReplicationRecord>> = (0..replications)
        .into_par_iter()
        .map(|rep| run_replication(&pop, truth, study, master_seed, rep))
        .collect();
    let records: Vec<ReplicationRecord> = per_rep.into_iter().flatten().collect();

    let mut rows: Vec<EstimatorSummary> = study
        .estimators
        .iter()
        .map(|spec| summarize(&spec.name, records.iter().filter(|r| r.estimator == spec.name)))
        .collect();
    let unweighted_bias = study
        .estimators
        .iter()
        .zip(&rows)
        .find(|(s, _)| s.kind == EstimatorKind::Unweighted)
        .map(|(_, r)| r.bias);
    for row in &mut rows {
        row.bias_reduction = unweighted_bias
            .map(|b0| 1.0 - row.bias.abs() / b0.abs())
            .filter(|x| x.is_finite());
    }
    rows.sort_by(|a, b| a.mse.total_cmp(&b.mse).then_with(|| a.name.cmp(&b.name)));

    let mut notes = vec![BIAS_REDUCTION_NOTE.to_string()];
    if replications < FEW_REPLICATIONS {
        notes.push(format!(
            "only {replications} replications: Monte-Carlo error is large, treat the table as indicative"
        ));
    }
    let sizes: Vec<f64> = records
        .iter()
        .filter(|r| r.estimator == study.estimators[0].name)
        .map(|r| r.sample_size as f64)
        .collect();
    Ok(SimulationReport {
        replications,
        seed: master_seed,
        population_size: pop.len(),
        true_mean: truth,
        mean_sample_size: kahan_mean(sizes.into_iter()),
        clipped_fraction: pop.clipped_fraction,
        rows,
        notes,
        records,
    })
}

fn summarize<'a>(name: &str, recs: impl Iterator<Item = &'a ReplicationRecord>) -> EstimatorSummary {
    let mut errors = Vec::new();
    let mut failures = 0;
    let mut nonconverged = 0;
    for r in recs {
        match r.error {
            Some(e) => {
                errors.push(e);
                if r.converged == Some(false) {
                    nonconverged += 1;
                }
            }
            None => failures += 1,
        }
    }
    let n = errors.len();
    let bias = kahan_mean(errors.iter().copied());
    let mse = kahan_mean(errors.iter().map(|e| e * e));
    let var = kahan_mean(errors.iter().map(|e| (e - bias) * (e - bias)));
    let se = var.sqrt();
    EstimatorSummary {
        name: name.to_string(),
        bias,
        se,
        mse,
        bias_reduction: None,
        mc_se: se / (n as f64).sqrt(),
        successes: n,
        failures,
        nonconverged,
    }
}

fn opt<T: ToString>(x: &Option<T>) -> String {
    x.as_ref().map_or_else(String::new, |v| v.to_string())
}

impl SimulationReport {
    pub fn write_summary_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "estimator",
            "bias",
            "se",
            "mse",
            "bias_reduction",
            "mc_se",
            "successes",
            "failures",
            "nonconverged",
        ])?;
        for r in &self.rows {
            out.write_record([
                r.name.clone(),
                r.bias.to_string(),
                r.se.to_string(),
                r.mse.to_string(),
                opt(&r.bias_reduction),
                r.mc_se.to_string(),
                r.successes.to_string(),
                r.failures.to_string(),
                r.nonconverged.to_string(),
            ])?;
        }
        out.flush().map_err(|e| KpopError::io("<summary csv>", e))?;
        Ok(())
    }

    pub fn write_records_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "replication",
            "estimator",
            "sample_size",
            "estimate",
            "error",
            "converged",
            "failure",
            "omitted_gap",
            "bias_bound_ratio",
            "l1_before",
            "l1_after",
            "chosen_r",
        ])?;
        for r in &self.records {
            out.write_record([
                r.replication.to_string(),
                r.estimator.clone(),
                r.sample_size.to_string(),
                opt(&r.estimate),
                opt(&r.error),
                opt(&r.converged),
                r.failure.clone().unwrap_or_default(),
                opt(&r.omitted_gap),
                opt(&r.bias_bound_ratio),
                opt(&r.l1_before),
                opt(&r.l1_after),
                opt(&r.chosen_r),
            ])?;
        }
        out.flush().map_err(|e| KpopError::io("<records csv>", e))?;
        Ok(())
    }
}
