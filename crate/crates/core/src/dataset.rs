//! Survey + population table, role validation, and the design encodings
//! every downstream step consumes.
//!
//! Rows are kept in file order. Everything that produces a matrix orders rows
//! sample-first, then population, which is the layout the kernel and spectral
//! modules assume.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KpopError, Result};

/// Joins levels in a strata key. Occurrences inside a level are escaped.
pub const STRATA_SEPARATOR: char = '§';

const MISSING_TOKENS: [&str; 3] = ["", "NA", "NaN"];

/// Which CSV columns play which role. Doubles as the JSON config document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ColumnRoles {
    pub sample_col: String,
    #[serde(default)]
    pub covariates: Vec<String>,
    /// Covariates to read as numbers rather than categorical levels.
    #[serde(default)]
    pub continuous: Vec<String>,
    #[serde(default)]
    pub base_weight_col: Option<String>,
    #[serde(default)]
    pub pop_weight_col: Option<String>,
    #[serde(default)]
    pub outcome_col: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ColumnData {
    Categorical { levels: Vec<String>, codes: Vec<u32> },
    Numeric(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variable {
    pub name: String,
    pub data: ColumnData,
}

impl Variable {
    pub fn categorical<S: AsRef<str>>(name: impl Into<String>, values: &[S]) -> Self {
        let mut levels: Vec<String> = Vec::new();
        let mut index: HashMap<&str, u32> = HashMap::new();
        let mut codes = Vec::with_capacity(values.len());
        for v in values {
            let v = v.as_ref();
            let code = *index.entry(v).or_insert_with(|| {
                levels.push(v.to_string());
                (levels.len() - 1) as u32
            });
            codes.push(code);
        }
        Variable {
            name: name.into(),
            data: ColumnData::Categorical { levels, codes },
        }
    }

    pub fn numeric(name: impl Into<String>, values: Vec<f64>) -> Self {
        Variable {
            name: name.into(),
            data: ColumnData::Numeric(values),
        }
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self.data, ColumnData::Categorical { .. })
    }

    pub fn levels(&self) -> Option<&[String]> {
        match &self.data {
            ColumnData::Categorical { levels, .. } => Some(levels),
            ColumnData::Numeric(_) => None,
        }
    }

    fn len(&self) -> usize {
        match &self.data {
            ColumnData::Categorical { codes, .. } => codes.len(),
            ColumnData::Numeric(v) => v.len(),
        }
    }

    fn value_string(&self, row: usize) -> String {
        match &self.data {
            ColumnData::Categorical { levels, codes } => levels[codes[row] as usize].clone(),
            ColumnData::Numeric(v) => format!("{}", v[row]),
        }
    }
}

/// Survey sample stacked with the target population.
#[derive(Clone, Debug)]
pub struct Dataset {
    variables: Vec<Variable>,
    in_sample: Vec<bool>,
    row_ids: Vec<usize>,
    sample_rows: Vec<usize>,
    population_rows: Vec<usize>,
    raw_base_weights: Option<Vec<f64>>,
    raw_pop_weights: Option<Vec<f64>>,
    base_weights: Vec<f64>,
    pop_weights: Vec<f64>,
    outcome: Option<Vec<f64>>,
    dropped_rows: usize,
}

impl Dataset {
    /// Builds a dataset from columns in row order.
    ///
    /// `base_weights` and `outcome` are indexed by sample position,
    /// `pop_weights` by population position. Categorical level sets are
    /// re-ordered to first appearance (sample rows before population rows)
    /// and unused levels are discarded.
    pub fn new(
        variables: Vec<Variable>,
        in_sample: Vec<bool>,
        base_weights: Option<Vec<f64>>,
        pop_weights: Option<Vec<f64>>,
        outcome: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = in_sample.len();
        for v in &variables {
            if v.len() != n {
                return Err(KpopError::DimensionMismatch(format!(
                    "variable {} has {} rows, expected {n}",
                    v.name,
                    v.len()
                )));
            }
        }
        let sample_rows: Vec<usize> = (0..n).filter(|&i| in_sample[i]).collect();
        let population_rows: Vec<usize> = (0..n).filter(|&i| !in_sample[i]).collect();
        if sample_rows.len() < 2 {
            return Err(KpopError::TooFewRows {
                which: "sample",
                found: sample_rows.len(),
            });
        }
        if population_rows.len() < 2 {
            return Err(KpopError::TooFewRows {
                which: "population",
                found: population_rows.len(),
            });
        }

        let base_weights_norm = match &base_weights {
            Some(w) => {
                check_len("base weights", w.len(), sample_rows.len())?;
                for (pos, &x) in w.iter().enumerate() {
                    if !(x > 0.0 && x.is_finite()) {
                        return Err(KpopError::NonPositiveBaseWeight {
                            row: sample_rows[pos],
                            value: x,
                        });
                    }
                }
                normalize(w)
            }
            None => vec![1.0 / sample_rows.len() as f64; sample_rows.len()],
        };
        let pop_weights_norm = match &pop_weights {
            Some(w) => {
                check_len("population weights", w.len(), population_rows.len())?;
                for (pos, &x) in w.iter().enumerate() {
                    if !(x >= 0.0 && x.is_finite()) {
                        return Err(KpopError::NegativePopulationWeight {
                            row: population_rows[pos],
                            value: x,
                        });
                    }
                }
                if w.iter().sum::<f64>() <= 0.0 {
                    return Err(KpopError::InvalidConfig(
                        "population weights sum to zero".into(),
                    ));
                }
                normalize(w)
            }
            None => vec![1.0 / population_rows.len() as f64; population_rows.len()],
        };
        if let Some(y) = &outcome {
            check_len("outcome", y.len(), sample_rows.len())?;
            if y.iter().any(|v| !v.is_finite()) {
                return Err(KpopError::NonFinite("outcome"));
            }
        }

        let order: Vec<usize> = sample_rows
            .iter()
            .chain(population_rows.iter())
            .copied()
            .collect();
        let variables = variables
            .into_iter()
            .map(|v| canonicalize_levels(v, &order))
            .collect();

        Ok(Dataset {
            variables,
            row_ids: (0..n).collect(),
            in_sample,
            sample_rows,
            population_rows,
            raw_base_weights: base_weights,
            raw_pop_weights: pop_weights,
            base_weights: base_weights_norm,
            pop_weights: pop_weights_norm,
            outcome,
            dropped_rows: 0,
        })
    }

    /// Reads a header-bearing CSV and applies `roles`.
    ///
    /// Rows with a missing covariate, flag, or required role value are
    /// dropped and counted (see [`Dataset::dropped_rows`]).
    pub fn load_csv(path: impl AsRef<Path>, roles: &ColumnRoles) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| KpopError::io(path, e))?;
        Self::from_reader(file, roles)
    }

    pub fn from_reader<R: std::io::Read>(reader: R, roles: &ColumnRoles) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let find = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| KpopError::RoleColumnAbsent(name.to_string()))
        };
        if roles.sample_col.is_empty() {
            return Err(KpopError::RoleColumnAbsent("sample_col".into()));
        }
        let sample_idx = find(&roles.sample_col)?;
        let cov_idx: Vec<usize> = roles
            .covariates
            .iter()
            .map(|c| find(c))
            .collect::<Result<_>>()?;
        for c in &roles.continuous {
            if !roles.covariates.contains(c) {
                return Err(KpopError::InvalidConfig(format!(
                    "continuous column {c} is not listed as a covariate"
                )));
            }
        }
        let opt = |c: &Option<String>| c.as_deref().map(find).transpose();
        let base_idx = opt(&roles.base_weight_col)?;
        let pop_idx = opt(&roles.pop_weight_col)?;
        let outcome_idx = opt(&roles.outcome_col)?;

        let mut raw_cov: Vec<Vec<String>> = vec![Vec::new(); cov_idx.len()];
        let mut in_sample = Vec::new();
        let mut row_ids = Vec::new();
        let mut base = Vec::new();
        let mut popw = Vec::new();
        let mut outcome = Vec::new();
        let mut dropped = 0usize;

        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or("").trim();
            let flag_raw = field(sample_idx);
            if is_missing(flag_raw) || cov_idx.iter().any(|&i| is_missing(field(i))) {
                dropped += 1;
                continue;
            }
            let flag = parse_flag(flag_raw).ok_or_else(|| KpopError::SampleFlagNotBinary {
                row,
                value: flag_raw.to_string(),
            })?;
            let role_value = |idx: Option<usize>, col: &Option<String>| -> Result<Option<Option<f64>>> {
                match idx {
                    None => Ok(Some(None)),
                    Some(i) => {
                        let s = field(i);
                        if is_missing(s) {
                            return Ok(None);
                        }
                        let v = s.parse::<f64>().map_err(|_| KpopError::BadNumber {
                            column: col.clone().unwrap_or_default(),
                            row,
                            value: s.to_string(),
                        })?;
                        Ok(Some(Some(v)))
                    }
                }
            };
            let (b, p, y) = if flag {
                let Some(b) = role_value(base_idx, &roles.base_weight_col)? else {
                    dropped += 1;
                    continue;
                };
                let Some(y) = role_value(outcome_idx, &roles.outcome_col)? else {
                    dropped += 1;
                    continue;
                };
                (b, None, y)
            } else {
                let Some(p) = role_value(pop_idx, &roles.pop_weight_col)? else {
                    dropped += 1;
                    continue;
                };
                (None, p, None)
            };
            if let Some(b) = b {
                if !(b > 0.0 && b.is_finite()) {
                    return Err(KpopError::NonPositiveBaseWeight { row, value: b });
                }
                base.push(b);
            }
            if let Some(p) = p {
                if !(p >= 0.0 && p.is_finite()) {
                    return Err(KpopError::NegativePopulationWeight { row, value: p });
                }
                popw.push(p);
            }
            if let Some(y) = y {
                outcome.push(y);
            }
            for (k, &i) in cov_idx.iter().enumerate() {
                raw_cov[k].push(field(i).to_string());
            }
            in_sample.push(flag);
            row_ids.push(row);
        }
        if dropped > 0 {
            log::warn!("dropped {dropped} rows with missing values");
        }

        let mut variables = Vec::with_capacity(cov_idx.len());
        for (k, name) in roles.covariates.iter().enumerate() {
            if roles.continuous.contains(name) {
                let vals = raw_cov[k]
                    .iter()
                    .enumerate()
                    .map(|(r, s)| {
                        s.parse::<f64>().map_err(|_| KpopError::BadNumber {
                            column: name.clone(),
                            row: row_ids[r],
                            value: s.clone(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                variables.push(Variable::numeric(name.clone(), vals));
            } else {
                variables.push(Variable::categorical(name.clone(), &raw_cov[k]));
            }
        }

        let mut ds = Dataset::new(
            variables,
            in_sample,
            base_idx.map(|_| base),
            pop_idx.map(|_| popw),
            outcome_idx.map(|_| outcome),
        )?;
        ds.row_ids = row_ids;
        ds.dropped_rows = dropped;
        Ok(ds)
    }

    /// Writes the dataset so that [`Dataset::load_csv`] with `roles` reads it back.
    pub fn write_csv<W: Write>(&self, writer: W, roles: &ColumnRoles) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = vec![roles.sample_col.as_str()];
        for v in &self.variables {
            header.push(&v.name);
        }
        if let Some(c) = &roles.base_weight_col {
            header.push(c);
        }
        if let Some(c) = &roles.pop_weight_col {
            header.push(c);
        }
        if let Some(c) = &roles.outcome_col {
            header.push(c);
        }
        w.write_record(&header)?;
        let mut s_pos = 0usize;
        let mut p_pos = 0usize;
        for row in 0..self.n_rows() {
            let flag = self.in_sample[row];
            let mut rec: Vec<String> = vec![if flag { "1".into() } else { "0".into() }];
            for v in &self.variables {
                rec.push(v.value_string(row));
            }
            if roles.base_weight_col.is_some() {
                rec.push(match (&self.raw_base_weights, flag) {
                    (Some(b), true) => format!("{}", b[s_pos]),
                    (None, true) => "1".into(),
                    _ => String::new(),
                });
            }
            if roles.pop_weight_col.is_some() {
                rec.push(match (&self.raw_pop_weights, flag) {
                    (Some(p), false) => format!("{}", p[p_pos]),
                    (None, false) => "1".into(),
                    _ => String::new(),
                });
            }
            if roles.outcome_col.is_some() {
                rec.push(match (&self.outcome, flag) {
                    (Some(y), true) => format!("{}", y[s_pos]),
                    _ => String::new(),
                });
            }
            w.write_record(&rec)?;
            if flag {
                s_pos += 1;
            } else {
                p_pos += 1;
            }
        }
        w.flush().map_err(|e| KpopError::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.in_sample.len()
    }

    pub fn n_sample(&self) -> usize {
        self.sample_rows.len()
    }

    pub fn n_population(&self) -> usize {
        self.population_rows.len()
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn variable(&self, name: &str) -> Result<&Variable> {
        self.variables
            .iter()
            .find(|v| v.name == name)
            .ok_or_else(|| KpopError::UnknownVariable(name.to_string()))
    }

    pub fn in_sample(&self) -> &[bool] {
        &self.in_sample
    }

    /// Row indices (file order) of sampled units.
    pub fn sample_rows(&self) -> &[usize] {
        &self.sample_rows
    }

    pub fn population_rows(&self) -> &[usize] {
        &self.population_rows
    }

    /// Sample rows followed by population rows.
    pub fn design_order(&self) -> Vec<usize> {
        self.sample_rows
            .iter()
            .chain(self.population_rows.iter())
            .copied()
            .collect()
    }

    /// Data-row index in the source file for each row.
    pub fn row_ids(&self) -> &[usize] {
        &self.row_ids
    }

    /// Normalized base weights q, one per sampled unit.
    pub fn base_weights(&self) -> &[f64] {
        &self.base_weights
    }

    /// Normalized population weights, one per population unit.
    pub fn pop_weights(&self) -> &[f64] {
        &self.pop_weights
    }

    /// Outcome for each sampled unit, if an outcome column was given.
    pub fn outcome(&self) -> Option<&[f64]> {
        self.outcome.as_deref()
    }

    pub fn dropped_rows(&self) -> usize {
        self.dropped_rows
    }

    /// `var:level` labels for levels carried by population rows only.
    pub fn population_only_levels(&self, vars: &[String]) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for name in vars {
            let v = self.variable(name)?;
            let ColumnData::Categorical { levels, codes } = &v.data else {
                return Err(KpopError::NotCategorical(name.clone()));
            };
            let mut in_s = vec![false; levels.len()];
            for &r in &self.sample_rows {
                in_s[codes[r] as usize] = true;
            }
            for (l, seen) in levels.iter().zip(in_s) {
                if !seen {
                    out.push(format!("{name}:{l}"));
                }
            }
        }
        Ok(out)
    }
}

/// One-hot (and standardized continuous) design, rows in design order.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignMatrix {
    values: Vec<f64>,
    n_rows: usize,
    n_cols: usize,
    n_sample: usize,
    pub column_names: Vec<String>,
    /// Variables whose level set has a single element.
    pub constant_variables: Vec<String>,
    pub categorical_only: bool,
}

impl DesignMatrix {
    pub fn from_row_major(values: Vec<f64>, n_rows: usize, n_cols: usize, n_sample: usize) -> Result<Self> {
        if values.len() != n_rows * n_cols {
            return Err(KpopError::DimensionMismatch(format!(
                "{} values for a {n_rows}x{n_cols} design",
                values.len()
            )));
        }
        if n_sample > n_rows {
            return Err(KpopError::DimensionMismatch("more sample rows than rows".into()));
        }
        let categorical_only = values.iter().all(|&v| v == 0.0 || v == 1.0);
        Ok(DesignMatrix {
            values,
            n_rows,
            n_cols,
            n_sample,
            column_names: (0..n_cols).map(|j| format!("x{j}")).collect(),
            constant_variables: Vec::new(),
            categorical_only,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn n_sample(&self) -> usize {
        self.n_sample
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_cols + j]
    }
}

/// Full one-hot encoding of `vars`, no reference level dropped and no
/// rescaling of the binaries. Continuous variables are centered and scaled
/// to unit variance over all rows.
pub fn one_hot(ds: &Dataset, vars: &[String]) -> Result<DesignMatrix> {
    let order = ds.design_order();
    let n = order.len();
    let mut blocks: Vec<(Vec<String>, Box<dyn Fn(usize, &mut [f64]) + '_>)> = Vec::new();
    let mut constant_variables = Vec::new();
    let mut categorical_only = true;
    for name in vars {
        let v = ds.variable(name)?;
        match &v.data {
            ColumnData::Categorical { levels, codes } => {
                if levels.len() == 1 {
                    log::warn!("variable {name} has a single level; kept as a constant column");
                    constant_variables.push(name.clone());
                }
                let names = levels.iter().map(|l| format!("{name}:{l}")).collect();
                blocks.push((
                    names,
                    Box::new(move |row, out: &mut [f64]| {
                        out.fill(0.0);
                        out[codes[row] as usize] = 1.0;
                    }),
                ));
            }
            ColumnData::Numeric(vals) => {
                categorical_only = false;
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>()
                    / (vals.len().max(2) - 1) as f64;
                let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
                blocks.push((
                    vec![name.clone()],
                    Box::new(move |row, out: &mut [f64]| out[0] = (vals[row] - mean) / sd),
                ));
            }
        }
    }
    let n_cols: usize = blocks.iter().map(|b| b.0.len()).sum();
    let mut values = vec![0.0; n * n_cols];
    for (i, &row) in order.iter().enumerate() {
        let out = &mut values[i * n_cols..(i + 1) * n_cols];
        let mut start = 0;
        for (names, fill) in &blocks {
            fill(row, &mut out[start..start + names.len()]);
            start += names.len();
        }
    }
    Ok(DesignMatrix {
        values,
        n_rows: n,
        n_cols,
        n_sample: ds.n_sample(),
        column_names: blocks.into_iter().flat_map(|b| b.0).collect(),
        constant_variables,
        categorical_only,
    })
}

/// Intersectional strata key for every row, in design order.
pub fn strata_labels(ds: &Dataset, vars: &[String]) -> Result<Vec<String>> {
    if vars.is_empty() {
        return Err(KpopError::InvalidConfig("strata need at least one variable".into()));
    }
    let cols: Vec<(&[String], &[u32])> = vars
        .iter()
        .map(|name| match &ds.variable(name)?.data {
            ColumnData::Categorical { levels, codes } => Ok((levels.as_slice(), codes.as_slice())),
            ColumnData::Numeric(_) => Err(KpopError::NotCategorical(name.clone())),
        })
        .collect::<Result<_>>()?;
    let escaped: Vec<Vec<String>> = cols
        .iter()
        .map(|(levels, _)| levels.iter().map(|l| escape_level(l)).collect())
        .collect();
    let sep = STRATA_SEPARATOR.to_string();
    Ok(ds
        .design_order()
        .into_iter()
        .map(|row| {
            cols.iter()
                .zip(&escaped)
                .map(|((_, codes), esc)| esc[codes[row] as usize].as_str())
                .collect::<Vec<_>>()
                .join(&sep)
        })
        .collect())
}

fn escape_level(level: &str) -> String {
    let mut out = String::with_capacity(level.len());
    for c in level.chars() {
        if c == '\\' || c == STRATA_SEPARATOR {
            out.push('\\');
        }
        out.push(c);
    }
    out
}

fn canonicalize_levels(v: Variable, order: &[usize]) -> Variable {
    match v.data {
        ColumnData::Categorical { levels, codes } => {
            let mut remap = vec![u32::MAX; levels.len()];
            let mut new_levels = Vec::new();
            for &row in order {
                let c = codes[row] as usize;
                if remap[c] == u32::MAX {
                    remap[c] = new_levels.len() as u32;
                    new_levels.push(levels[c].clone());
                }
            }
            Variable {
                name: v.name,
                data: ColumnData::Categorical {
                    levels: new_levels,
                    codes: codes.into_iter().map(|c| remap[c as usize]).collect(),
                },
            }
        }
        data => Variable { name: v.name, data },
    }
}

fn normalize(w: &[f64]) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(KpopError::DimensionMismatch(format!(
            "{what}: {got} values for {want} rows"
        )));
    }
    Ok(())
}

fn is_missing(s: &str) -> bool {
    MISSING_TOKENS.contains(&s)
}

fn parse_flag(s: &str) -> Option<bool> {
    match s.to_ascii_lowercase().as_str() {
        "1" | "1.0" | "true" => Some(true),
        "0" | "0.0" | "false" => Some(false),
        _ => None,
    }
}
