//! Command-line front end. `run` parses arguments, executes one subcommand
//! and returns the process exit code: 0 converged, 2 usable but not
//! converged, 1 error.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::balancing::{
    self, bias_bound, default_margin_specs, ess, l1_imbalance, margin_error_table, n_to_90pct, KernelBasis, KpopConfig,
    MarginRow,
};
use crate::calibration::{post_stratify, rake_margins_with, write_weights_csv, WeightSolution};
use crate::dataset::{one_hot, ColumnRoles, Dataset};
use crate::error::{KpopError, Result};
use crate::estimation::{weighted_mean, EstimateResult};
use crate::kernel::{distance_histogram, make_kernel, select_bandwidth, KernelMatrix};
use crate::simulation::{run_study, StudyConfig};
use crate::spectral::write_scree_csv;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;

const DEFAULT_SCREE_K: usize = 100;

#[derive(Parser, Debug)]
#[command(name = "kpop", version, about = "Kernel-balancing survey weights and diagnostics")]
struct Cli {
    /// Repeat for more log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Kernel balancing weights.
    Kpop(KpopArgs),
    /// Mean calibration on the one-hot margins of --vars.
    Rake(DataArgs),
    /// Post-stratification on the intersection of --vars.
    Poststrat(DataArgs),
    /// Balance diagnostics for an existing weights file.
    Diagnose(DiagnoseArgs),
    /// Singular-value spectrum of the kernel matrix.
    Scree(ScreeArgs),
    /// Monte-Carlo comparison of estimators on a synthetic population.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// Output directory, created if needed.
    #[arg(long, default_value = "kpop-out")]
    out: PathBuf,
    /// JSON document whose keys override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    jobs: Option<usize>,
    /// Master seed for any randomness.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// CSV holding sampled and population rows.
    data: Option<PathBuf>,
    /// 0/1 column marking sampled rows.
    #[arg(long)]
    sample_col: Option<String>,
    /// Balancing variables, comma separated.
    #[arg(long, value_delimiter = ',')]
    vars: Vec<String>,
    /// Variables among --vars to treat as numeric.
    #[arg(long, value_delimiter = ',')]
    continuous: Vec<String>,
    #[arg(long)]
    pop_weight_col: Option<String>,
    #[arg(long)]
    base_weight_col: Option<String>,
    #[arg(long)]
    outcome_col: Option<String>,
    /// Calibration tolerance in the units of the constraints.
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    maxit: Option<usize>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug, Clone)]
struct KernelArgs {
    /// Kernel bandwidth; variance-maximizing when omitted.
    #[arg(long)]
    b: Option<f64>,
    #[arg(long)]
    b_multiplier: Option<f64>,
    #[arg(long)]
    svd_floor: Option<f64>,
    /// KPK1 file: read when present, written otherwise. Only dimensions
    /// and bandwidth are checked against the data.
    #[arg(long)]
    kernel_cache: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct KpopArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    kernel: KernelArgs,
    #[arg(long)]
    min_dims: Option<usize>,
    #[arg(long)]
    max_dims: Option<usize>,
    #[arg(long)]
    increment: Option<usize>,
    /// Variables whose margins are calibrated exactly before the kernel.
    #[arg(long, value_delimiter = ',')]
    mean_first: Vec<String>,
    /// Only accept grid points whose calibration converged.
    #[arg(long)]
    require_convergence: bool,
    /// Number of singular values written to scree.csv.
    #[arg(long)]
    scree_k: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct DiagnoseArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    kernel: KernelArgs,
    /// weights.csv from a previous run, rows in sample order.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Number of singular vectors the weights balanced, if known.
    #[arg(long)]
    chosen_r: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct ScreeArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    kernel: KernelArgs,
    #[arg(long)]
    scree_k: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct SimulateArgs {
    /// Study JSON: DGP, estimators, replications, seed.
    #[arg(long)]
    study: Option<PathBuf>,
    /// Overrides the study's replication count.
    #[arg(long)]
    reps: Option<usize>,
    #[command(flatten)]
    common: CommonArgs,
}

/// Everything a run depends on, after flags and the --config document are
/// merged. Echoed into manifest.json.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub subcommand: String,
    pub data: Option<PathBuf>,
    pub sample_col: Option<String>,
    pub covariates: Vec<String>,
    pub continuous: Vec<String>,
    pub base_weight_col: Option<String>,
    pub pop_weight_col: Option<String>,
    pub outcome_col: Option<String>,
    pub kpop: KpopConfig,
    pub kernel_cache: Option<PathBuf>,
    pub scree_k: usize,
    pub weights: Option<PathBuf>,
    pub chosen_r: Option<usize>,
    pub study: Option<PathBuf>,
    pub reps: Option<usize>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub verbosity: u8,
}

impl RunConfig {
    fn blank(subcommand: &str, common: &CommonArgs, verbosity: u8) -> Self {
        RunConfig {
            subcommand: subcommand.to_string(),
            data: None,
            sample_col: None,
            covariates: Vec::new(),
            continuous: Vec::new(),
            base_weight_col: None,
            pop_weight_col: None,
            outcome_col: None,
            kpop: KpopConfig::default(),
            kernel_cache: None,
            scree_k: DEFAULT_SCREE_K,
            weights: None,
            chosen_r: None,
            study: None,
            reps: None,
            out: common.out.clone(),
            seed: common.seed,
            jobs: common.jobs,
            verbosity,
        }
    }

    fn with_data(mut self, d: &DataArgs) -> Self {
        self.data = d.data.clone();
        self.sample_col = d.sample_col.clone();
        self.covariates = d.vars.clone();
        self.continuous = d.continuous.clone();
        self.base_weight_col = d.base_weight_col.clone();
        self.pop_weight_col = d.pop_weight_col.clone();
        self.outcome_col = d.outcome_col.clone();
        if let Some(t) = d.tolerance {
            self.kpop.tolerance = t;
        }
        if let Some(m) = d.maxit {
            self.kpop.max_iterations = m;
        }
        self
    }

    fn with_kernel(mut self, k: &KernelArgs) -> Self {
        self.kpop.b = k.b.or(self.kpop.b);
        if let Some(m) = k.b_multiplier {
            self.kpop.b_multiplier = m;
        }
        if let Some(f) = k.svd_floor {
            self.kpop.svd_floor = f;
        }
        self.kernel_cache = k.kernel_cache.clone();
        self
    }

    fn from_cli(cli: &Cli) -> Result<(Self, Option<PathBuf>)> {
        let v = cli.verbose;
        let (cfg, config_path) = match &cli.command {
            Command::Kpop(a) => {
                let mut c = RunConfig::blank("kpop", &a.data.common, v)
                    .with_data(&a.data)
                    .with_kernel(&a.kernel);
                if let Some(x) = a.min_dims {
                    c.kpop.min_dims = x;
                }
                c.kpop.max_dims = a.max_dims;
                if let Some(x) = a.increment {
                    c.kpop.increment = x;
                }
                c.kpop.mean_first_vars = a.mean_first.clone();
                c.kpop.require_convergence = a.require_convergence;
                if let Some(k) = a.scree_k {
                    c.scree_k = k;
                }
                (c, a.data.common.config.clone())
            }
            Command::Rake(d) => (
                RunConfig::blank("rake", &d.common, v).with_data(d),
                d.common.config.clone(),
            ),
            Command::Poststrat(d) => (
                RunConfig::blank("poststrat", &d.common, v).with_data(d),
                d.common.config.clone(),
            ),
            Command::Diagnose(a) => {
                let mut c = RunConfig::blank("diagnose", &a.data.common, v)
                    .with_data(&a.data)
                    .with_kernel(&a.kernel);
                c.weights = a.weights.clone();
                c.chosen_r = a.chosen_r;
                (c, a.data.common.config.clone())
            }
            Command::Scree(a) => {
                let mut c = RunConfig::blank("scree", &a.data.common, v)
                    .with_data(&a.data)
                    .with_kernel(&a.kernel);
                if let Some(k) = a.scree_k {
                    c.scree_k = k;
                }
                (c, a.data.common.config.clone())
            }
            Command::Simulate(a) => {
                let mut c = RunConfig::blank("simulate", &a.common, v);
                c.study = a.study.clone();
                c.reps = a.reps;
                (c, a.common.config.clone())
            }
        };
        Ok((cfg, config_path))
    }

    /// Applies a JSON object on top of this config. Nested objects merge
    /// key by key; `subcommand` cannot be changed.
    pub fn overlay(self, doc: &Value) -> Result<Self> {
        let Value::Object(_) = doc else {
            return Err(KpopError::InvalidConfig("config document must be a JSON object".into()));
        };
        let sub = self.subcommand.clone();
        let mut base = serde_json::to_value(&self)?;
        merge(&mut base, doc);
        let merged: RunConfig = serde_json::from_value(base)?;
        if merged.subcommand != sub {
            return Err(KpopError::InvalidConfig(format!(
                "config names subcommand {} but {sub} was invoked",
                merged.subcommand
            )));
        }
        Ok(merged)
    }

    fn roles(&self) -> Result<ColumnRoles> {
        let sample_col = match &self.sample_col {
            Some(s) if !s.is_empty() => s.clone(),
            _ => return Err(KpopError::RoleColumnAbsent("sample_col (set --sample-col)".into())),
        };
        if self.covariates.is_empty() {
            return Err(KpopError::InvalidConfig("no balancing variables (set --vars)".into()));
        }
        Ok(ColumnRoles {
            sample_col,
            covariates: self.covariates.clone(),
            continuous: self.continuous.clone(),
            base_weight_col: self.base_weight_col.clone(),
            pop_weight_col: self.pop_weight_col.clone(),
            outcome_col: self.outcome_col.clone(),
        })
    }

    /// Checks flag combinations before any data is read.
    fn validate(&self) -> Result<()> {
        let need = |what: &Option<PathBuf>, flag: &str| {
            if what.is_none() {
                Err(KpopError::InvalidConfig(format!("{} requires {flag}", self.subcommand)))
            } else {
                Ok(())
            }
        };
        if self.jobs == Some(0) {
            return Err(KpopError::InvalidConfig("--jobs must be at least 1".into()));
        }
        match self.subcommand.as_str() {
            "simulate" => {
                need(&self.study, "--study")?;
                if let Some(r) = self.reps {
                    if r < 2 {
                        return Err(KpopError::InvalidConfig("--reps must be at least 2".into()));
                    }
                }
            }
            sub => {
                need(&self.data, "a data file")?;
                self.roles()?;
                if sub == "diagnose" {
                    need(&self.weights, "--weights")?;
                }
                if (sub == "scree" || sub == "kpop") && self.scree_k == 0 {
                    return Err(KpopError::InvalidConfig("--scree-k must be at least 1".into()));
                }
                self.kpop.validate()?;
            }
        }
        Ok(())
    }
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot @ Value::Object(_)) if v.is_object() => merge(slot, v),
                    Some(slot) => *slot = v.clone(),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

#[derive(Serialize)]
struct InputRecord {
    role: &'static str,
    path: PathBuf,
    bytes: u64,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    config: &'a RunConfig,
    inputs: &'a [InputRecord],
    seed: Option<u64>,
    outputs: Vec<&'a str>,
}

fn hash_input(role: &'static str, path: &Path) -> Result<InputRecord> {
    let bytes = std::fs::read(path).map_err(|e| KpopError::io(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(InputRecord {
        role,
        path: path.to_path_buf(),
        bytes: bytes.len() as u64,
        sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
    })
}

/// Collects output files and writes the manifest last.
struct OutputDir {
    dir: PathBuf,
    written: Vec<&'static str>,
}

impl OutputDir {
    fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| KpopError::io(dir, e))?;
        Ok(OutputDir {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn write(&mut self, name: &'static str, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let path = self.dir.join(name);
        let file = File::create(&path).map_err(|e| KpopError::io(&path, e))?;
        let mut w = BufWriter::new(file);
        f(&mut w)?;
        w.flush().map_err(|e| KpopError::io(&path, e))?;
        self.written.push(name);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &'static str, value: &T) -> Result<()> {
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            w.write_all(b"\n").map_err(|e| KpopError::io(name, e))
        })
    }

    fn finish(mut self, cfg: &RunConfig, inputs: &[InputRecord], seed: Option<u64>) -> Result<()> {
        let outputs: Vec<&str> = self.written.clone();
        let manifest = Manifest {
            tool: "kpop",
            version: env!("CARGO_PKG_VERSION"),
            config: cfg,
            inputs,
            seed,
            outputs,
        };
        self.json("manifest.json", &manifest)
    }
}

fn write_margins<W: Write>(rows: &[MarginRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["variable", "error_pp"])?;
    for r in rows {
        out.write_record([r.variable.clone(), r.error_pp.to_string()])?;
    }
    out.flush().map_err(|e| KpopError::io("<margins csv>", e))?;
    Ok(())
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// exit code. Errors go to stderr as one line: `error: <code>: <message>`.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return EXIT_ERROR;
        }
    };
    init_logging(cli.verbose);
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.code());
            EXIT_ERROR
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

fn execute(cli: &Cli) -> Result<i32> {
    let (cfg, config_path) = RunConfig::from_cli(cli)?;
    let mut inputs = Vec::new();
    let cfg = match config_path {
        Some(p) => {
            let text = std::fs::read_to_string(&p).map_err(|e| KpopError::io(&p, e))?;
            inputs.push(hash_input("config", &p)?);
            cfg.overlay(&serde_json::from_str(&text)?)?
        }
        None => cfg,
    };
    cfg.validate()?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cfg.jobs {
        pool = pool.num_threads(j);
    }
    let pool = pool
        .build()
        .map_err(|e| KpopError::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(|| match cfg.subcommand.as_str() {
        "kpop" => cmd_kpop(&cfg, inputs),
        "rake" => cmd_rake(&cfg, inputs),
        "poststrat" => cmd_poststrat(&cfg, inputs),
        "diagnose" => cmd_diagnose(&cfg, inputs),
        "scree" => cmd_scree(&cfg, inputs),
        "simulate" => cmd_simulate(&cfg, inputs),
        other => Err(KpopError::InvalidConfig(format!("unknown subcommand {other}"))),
    })
}

fn load(cfg: &RunConfig, inputs: &mut Vec<InputRecord>) -> Result<Dataset> {
    let path = cfg.data.as_deref().expect("validated");
    let ds = Dataset::load_csv(path, &cfg.roles()?)?;
    inputs.push(hash_input("data", path)?);
    if ds.dropped_rows() > 0 {
        log::warn!("dropped {} rows with missing values", ds.dropped_rows());
    }
    Ok(ds)
}

/// Kernel from the cache file when one exists, otherwise computed (and
/// cached when a path is configured).
fn kernel_for(cfg: &RunConfig, ds: &Dataset, inputs: &mut Vec<InputRecord>) -> Result<KernelMatrix> {
    if let Some(path) = &cfg.kernel_cache {
        if path.exists() {
            let file = File::open(path).map_err(|e| KpopError::io(path, e))?;
            let k = KernelMatrix::read_kpk1(std::io::BufReader::new(file))?;
            if k.n_rows() != ds.n_rows() || k.n_sample() != ds.n_sample() {
                return Err(KpopError::BadKernelCache(format!(
                    "{}×{} kernel for {} rows with {} sampled",
                    k.n_rows(),
                    k.n_bases(),
                    ds.n_rows(),
                    ds.n_sample()
                )));
            }
            if let Some(b) = cfg.kpop.b {
                let want = b * cfg.kpop.b_multiplier;
                if (k.bandwidth() - want).abs() > 1e-12 * want {
                    return Err(KpopError::BadKernelCache(format!(
                        "cached bandwidth {} but {want} requested",
                        k.bandwidth()
                    )));
                }
            }
            inputs.push(hash_input("kernel_cache", path)?);
            log::info!("kernel read from {}", path.display());
            return Ok(k);
        }
    }
    let design = one_hot(ds, &cfg.covariates)?;
    let b = match cfg.kpop.b {
        Some(b) => b,
        None => select_bandwidth(&distance_histogram(&design)?, cfg.kpop.bandwidth_interval)?,
    } * cfg.kpop.b_multiplier;
    let k = make_kernel(&design, b)?;
    if let Some(path) = &cfg.kernel_cache {
        let file = File::create(path).map_err(|e| KpopError::io(path, e))?;
        k.write_kpk1(BufWriter::new(file)).map_err(|e| KpopError::io(path, e))?;
        log::info!("kernel cached to {}", path.display());
    }
    Ok(k)
}

fn estimate_line(est: &Option<EstimateResult>) -> String {
    match est {
        Some(e) => format!(
            "estimate {:.4} (se {:.4}, 95% CI {:.4} to {:.4})",
            e.estimate, e.se, e.ci_low, e.ci_high
        ),
        None => "no outcome column: no estimate".into(),
    }
}

fn exit_for(converged: bool) -> i32 {
    if converged {
        EXIT_OK
    } else {
        EXIT_NOT_CONVERGED
    }
}

fn cmd_kpop(cfg: &RunConfig, mut inputs: Vec<InputRecord>) -> Result<i32> {
    let ds = load(cfg, &mut inputs)?;
    let kernel = kernel_for(cfg, &ds, &mut inputs)?;
    let basis: KernelBasis = balancing::basis_from_kernel(kernel, &cfg.kpop)?;
    let rep = balancing::solve_with_basis(&ds, &cfg.covariates, &basis, &cfg.kpop)?;

    let mut out = OutputDir::create(&cfg.out)?;
    out.write("weights.csv", |w| write_weights_csv(&ds, &rep.weights.weights, w))?;
    out.json("report.json", &rep)?;
    out.write("margins.csv", |w| write_margins(&rep.margin_table, w))?;
    let k = cfg.scree_k.min(basis.decomposition.rank());
    out.write("scree.csv", |w| write_scree_csv(&basis.decomposition, k, w))?;
    out.finish(cfg, &inputs, cfg.seed)?;

    let status = if rep.weights.converged {
        "converged"
    } else {
        "NOT converged"
    };
    println!(
        "kpop: {} sampled, {} population rows; bandwidth {}; kernel rank {}",
        ds.n_sample(),
        ds.n_population(),
        rep.bandwidth,
        rep.rank
    );
    println!(
        "chosen r = {} ({status}, residual {:.2e}); mean-first columns {}",
        rep.chosen_r, rep.weights.residual, rep.mean_first_dims
    );
    if rep.chosen_r <= 2 {
        println!("warning: only {} singular vectors balanced", rep.chosen_r);
    }
    println!(
        "bias bound {:.4e} -> {:.4e} (ratio {:.3}); L1 {:.4e} -> {:.4e}",
        rep.bias_bound_before, rep.bias_bound_after, rep.bias_bound_ratio, rep.l1_before, rep.l1_after
    );
    println!("ESS {:.2}; {} units carry 90% of the weight", rep.ess, rep.n_to_90pct);
    println!("{}", estimate_line(&rep.estimate));
    println!("outputs in {}", cfg.out.display());
    Ok(exit_for(rep.weights.converged))
}

#[derive(Serialize)]
struct CalibrationReport<'a, T: Serialize> {
    method: &'static str,
    variables: &'a [String],
    converged: bool,
    residual: f64,
    iterations: usize,
    divergence: f64,
    ess: f64,
    n_to_90pct: usize,
    margin_table: &'a [MarginRow],
    estimate: Option<EstimateResult>,
    #[serde(flatten)]
    details: T,
}

#[derive(Serialize)]
struct RakeDetails<'a> {
    unsupported_levels: &'a [String],
}

#[derive(Serialize)]
struct PostStratDetails<'a> {
    dropped_strata: &'a [crate::calibration::DroppedStratum],
    dropped_mass: f64,
}

fn finish_calibration<T: Serialize>(
    cfg: &RunConfig,
    ds: &Dataset,
    method: &'static str,
    sol: &WeightSolution,
    details: T,
    inputs: Vec<InputRecord>,
) -> Result<i32> {
    let specs = default_margin_specs(ds, &cfg.covariates)?;
    let margins = margin_error_table(ds, &specs, &sol.weights)?;
    let estimate = ds.outcome().map(|y| weighted_mean(y, &sol.weights)).transpose()?;
    let report = CalibrationReport {
        method,
        variables: &cfg.covariates,
        converged: sol.converged,
        residual: sol.residual,
        iterations: sol.iterations,
        divergence: sol.divergence,
        ess: ess(&sol.weights),
        n_to_90pct: n_to_90pct(&sol.weights),
        margin_table: &margins,
        estimate: estimate.clone(),
        details,
    };
    let mut out = OutputDir::create(&cfg.out)?;
    out.write("weights.csv", |w| write_weights_csv(ds, &sol.weights, w))?;
    out.json("report.json", &report)?;
    out.write("margins.csv", |w| write_margins(&margins, w))?;
    out.finish(cfg, &inputs, cfg.seed)?;

    let status = if sol.converged { "converged" } else { "NOT converged" };
    println!(
        "{method}: {} sampled, {} population rows; {status} (residual {:.2e})",
        ds.n_sample(),
        ds.n_population(),
        sol.residual
    );
    println!(
        "ESS {:.2}; {} units carry 90% of the weight",
        report.ess, report.n_to_90pct
    );
    println!("{}", estimate_line(&estimate));
    println!("outputs in {}", cfg.out.display());
    Ok(exit_for(sol.converged))
}

fn cmd_rake(cfg: &RunConfig, mut inputs: Vec<InputRecord>) -> Result<i32> {
    let ds = load(cfg, &mut inputs)?;
    let r = rake_margins_with(&ds, &cfg.covariates, cfg.kpop.tolerance, cfg.kpop.max_iterations)?;
    for l in &r.unsupported_levels {
        println!("warning: level {l} has no sampled units");
    }
    let details = RakeDetails {
        unsupported_levels: &r.unsupported_levels,
    };
    finish_calibration(cfg, &ds, "rake", &r.solution, details, inputs)
}

fn cmd_poststrat(cfg: &RunConfig, mut inputs: Vec<InputRecord>) -> Result<i32> {
    let ds = load(cfg, &mut inputs)?;
    let p = post_stratify(&ds, &cfg.covariates)?;
    if !p.dropped.is_empty() {
        println!(
            "warning: {} population strata without sampled units dropped ({:.2}% of population)",
            p.dropped.len(),
            100.0 * p.dropped_mass
        );
    }
    let details = PostStratDetails {
        dropped_strata: &p.dropped,
        dropped_mass: p.dropped_mass,
    };
    finish_calibration(cfg, &ds, "poststrat", &p.solution, details, inputs)
}

/// Weights in sample order from a `row_id,weight,…` file, normalized to
/// sum to one.
fn read_weights(path: &Path, ds: &Dataset) -> Result<Vec<f64>> {
    let file = File::open(path).map_err(|e| KpopError::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let w_idx = col("weight").ok_or_else(|| KpopError::RoleColumnAbsent("weight".into()))?;
    let id_idx = col("row_id");
    let mut w = Vec::new();
    let ids = ds.row_ids();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let raw = rec.get(w_idx).unwrap_or("").trim();
        let v: f64 = raw.parse().map_err(|_| KpopError::BadNumber {
            column: "weight".into(),
            row: i,
            value: raw.to_string(),
        })?;
        if !(v >= 0.0 && v.is_finite()) {
            return Err(KpopError::InvalidConfig(format!(
                "weight {v} at row {i} is not a finite non-negative number"
            )));
        }
        if let (Some(j), Some(&row)) = (id_idx, ds.sample_rows().get(i)) {
            let id = rec.get(j).unwrap_or("").trim();
            if id != ids[row].to_string() {
                return Err(KpopError::DimensionMismatch(format!(
                    "weights row {i} has row_id {id}, sampled unit has {}",
                    ids[row]
                )));
            }
        }
        w.push(v);
    }
    if w.len() != ds.n_sample() {
        return Err(KpopError::DimensionMismatch(format!(
            "{} weights for {} sampled units",
            w.len(),
            ds.n_sample()
        )));
    }
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(KpopError::InvalidConfig("weights sum to zero".into()));
    }
    Ok(w.into_iter().map(|x| x / total).collect())
}

#[derive(Serialize)]
struct Diagnostics<'a> {
    chosen_r: Option<usize>,
    few_dimensions_warning: bool,
    bandwidth: f64,
    rank: usize,
    bias_bound_before: f64,
    bias_bound_after: f64,
    bias_bound_ratio: f64,
    l1_before: f64,
    l1_after: f64,
    ess: f64,
    n_to_90pct: usize,
    margin_table: &'a [MarginRow],
}

fn cmd_diagnose(cfg: &RunConfig, mut inputs: Vec<InputRecord>) -> Result<i32> {
    let ds = load(cfg, &mut inputs)?;
    let wpath = cfg.weights.as_deref().expect("validated");
    let w = read_weights(wpath, &ds)?;
    inputs.push(hash_input("weights", wpath)?);
    let kernel = kernel_for(cfg, &ds, &mut inputs)?;
    let basis = balancing::basis_from_kernel(kernel, &cfg.kpop)?;
    let q = ds.base_weights();
    let pop_w = ds.pop_weights();
    let before = bias_bound(&basis.decomposition, q, pop_w)?.value;
    let after = bias_bound(&basis.decomposition, &w, pop_w)?.value;
    let specs = default_margin_specs(&ds, &cfg.covariates)?;
    let margins = margin_error_table(&ds, &specs, &w)?;
    let few = cfg.chosen_r.is_some_and(|r| r <= 2);
    let d = Diagnostics {
        chosen_r: cfg.chosen_r,
        few_dimensions_warning: few,
        bandwidth: basis.kernel.bandwidth(),
        rank: basis.decomposition.rank(),
        bias_bound_before: before,
        bias_bound_after: after,
        bias_bound_ratio: balancing::bound_ratio(before, after),
        l1_before: l1_imbalance(&basis.kernel, q, pop_w)?,
        l1_after: l1_imbalance(&basis.kernel, &w, pop_w)?,
        ess: ess(&w),
        n_to_90pct: n_to_90pct(&w),
        margin_table: &margins,
    };
    let mut out = OutputDir::create(&cfg.out)?;
    out.json("diagnostics.json", &d)?;
    out.write("margins.csv", |wr| write_margins(&margins, wr))?;
    out.finish(cfg, &inputs, cfg.seed)?;

    if few {
        println!(
            "warning: chosen r = {} is very small; the kernel may be too smooth or the sample too unlike the population",
            cfg.chosen_r.unwrap_or(0)
        );
    }
    println!(
        "L1 imbalance {:.4e} -> {:.4e}; bias bound {:.4e} -> {:.4e} (ratio {:.3})",
        d.l1_before, d.l1_after, before, after, d.bias_bound_ratio
    );
    println!("ESS {:.2}; {} units carry 90% of the weight", d.ess, d.n_to_90pct);
    for m in &margins {
        println!("  {:<30} {:>8.3} pp", m.variable, m.error_pp);
    }
    Ok(EXIT_OK)
}

fn cmd_scree(cfg: &RunConfig, mut inputs: Vec<InputRecord>) -> Result<i32> {
    let ds = load(cfg, &mut inputs)?;
    let kernel = kernel_for(cfg, &ds, &mut inputs)?;
    let basis = balancing::basis_from_kernel(kernel, &cfg.kpop)?;
    let dec = &basis.decomposition;
    let k = cfg.scree_k.min(dec.rank());
    let mut out = OutputDir::create(&cfg.out)?;
    out.write("scree.csv", |w| write_scree_csv(dec, k, w))?;
    out.finish(cfg, &inputs, cfg.seed)?;
    println!(
        "bandwidth {}; rank {}; leading singular value {:.6e}",
        basis.kernel.bandwidth(),
        dec.rank(),
        dec.singular_values[0]
    );
    for (i, a) in dec.singular_values.iter().take(k.min(10)).enumerate() {
        println!("  {:>3} {:.6e}", i + 1, a / dec.singular_values[0]);
    }
    Ok(EXIT_OK)
}

fn cmd_simulate(cfg: &RunConfig, mut inputs: Vec<InputRecord>) -> Result<i32> {
    let path = cfg.study.as_deref().expect("validated");
    let study = StudyConfig::load(path)?;
    inputs.push(hash_input("study", path)?);
    let reps = cfg.reps.unwrap_or(study.replications);
    let seed = cfg.seed.unwrap_or(study.seed);
    let report = run_study(&study, reps, seed)?;
    let mut out = OutputDir::create(&cfg.out)?;
    out.write("summary.csv", |w| report.write_summary_csv(w))?;
    out.write("records.csv", |w| report.write_records_csv(w))?;
    out.json("report.json", &report)?;
    out.finish(cfg, &inputs, Some(seed))?;

    println!(
        "{} replications, population {}, true mean {:.5}, mean sample size {:.1}",
        report.replications, report.population_size, report.true_mean, report.mean_sample_size
    );
    println!(
        "{:<24} {:>10} {:>10} {:>11} {:>8} {:>6} {:>6}",
        "estimator", "bias", "se", "mse", "bias_red", "fail", "noconv"
    );
    for r in &report.rows {
        let red = r.bias_reduction.map_or_else(|| "-".into(), |x| format!("{x:.3}"));
        println!(
            "{:<24} {:>10.5} {:>10.5} {:>11.3e} {:>8} {:>6} {:>6}",
            r.name, r.bias, r.se, r.mse, red, r.failures, r.nonconverged
        );
    }
    for n in &report.notes {
        println!("note: {n}");
    }
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parsed(args: &[&str]) -> RunConfig {
        let cli = Cli::try_parse_from(args).unwrap();
        RunConfig::from_cli(&cli).unwrap().0
    }

    #[test]
    fn flags_map_into_config() {
        let c = parsed(&[
            "kpop",
            "kpop",
            "d.csv",
            "--sample-col",
            "s",
            "--vars",
            "a,b",
            "--b",
            "2",
            "--increment",
            "1",
            "--mean-first",
            "a",
            "--require-convergence",
            "--maxit",
            "50",
        ]);
        assert_eq!(c.covariates, vec!["a", "b"]);
        assert_eq!(c.kpop.b, Some(2.0));
        assert_eq!(c.kpop.increment, 1);
        assert_eq!(c.kpop.max_iterations, 50);
        assert_eq!(c.kpop.mean_first_vars, vec!["a"]);
        assert!(c.kpop.require_convergence);
        c.validate().unwrap();
    }

    #[test]
    fn overlay_overrides_nested_keys_only() {
        let c = parsed(&["kpop", "kpop", "d.csv", "--sample-col", "s", "--vars", "a", "--b", "2"]);
        let doc: Value = serde_json::json!({"covariates": ["x", "y"], "kpop": {"min_dims": 3}});
        let m = c.clone().overlay(&doc).unwrap();
        assert_eq!(m.covariates, vec!["x", "y"]);
        assert_eq!(m.kpop.min_dims, 3);
        assert_eq!(m.kpop.b, Some(2.0));
        assert!(c.clone().overlay(&serde_json::json!({"nonsense": 1})).is_err());
        assert!(c.clone().overlay(&serde_json::json!({"subcommand": "rake"})).is_err());
        assert!(c.overlay(&serde_json::json!([1])).is_err());
    }

    #[test]
    fn missing_roles_rejected_before_compute() {
        let c = parsed(&["kpop", "rake", "d.csv", "--vars", "a"]);
        assert!(matches!(c.validate(), Err(KpopError::RoleColumnAbsent(_))));
        let c = parsed(&["kpop", "rake", "d.csv", "--sample-col", "s"]);
        assert!(matches!(c.validate(), Err(KpopError::InvalidConfig(_))));
        let c = parsed(&["kpop", "diagnose", "d.csv", "--sample-col", "s", "--vars", "a"]);
        assert!(c.validate().is_err());
        let c = parsed(&["kpop", "simulate"]);
        assert!(c.validate().is_err());
        let c = parsed(&[
            "kpop",
            "rake",
            "d.csv",
            "--sample-col",
            "s",
            "--vars",
            "a",
            "--jobs",
            "0",
        ]);
        assert!(c.validate().is_err());
    }
}
