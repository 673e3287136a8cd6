//! Experiment runner behind the `mvdrl` binary.
//!
//! Configuration is a TOML file tagged `format = "mvdrl-config/1"`; every
//! section is optional and defaults are echoed back in `summary.json`.
//!
//! ```toml
//! format = "mvdrl-config/1"
//! algorithm = "dp-cat"        # dp-cat | dp-ewp | td-cat | td-ewp
//! seeds = [0, 1, 2]
//!
//! [mdp]
//! source = "random"           # random | file | dsm
//! n_states = 5
//! d = 2
//! gamma = 0.9
//!
//! [support]
//! kind = "grid"               # grid | simplex | random | file
//! per_axis = 8
//! ```
//!
//! Exit codes: 0 success, 2 configuration error, 3 engine diagnostic.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dp::{categorical_dp_solve, ewp_random_solve, signed_dp_solve, DpReport, EwpConfig};
use crate::error::{Error, Result};
use crate::eval::{mc_oracle_fn, mesh_and_bound, zeroshot_errors};
use crate::kernels::{mmd, KernelSpec};
use crate::mdp::{dsm_mdp, random_mdp, RngStream, TabularMdp};
use crate::measures::{mixture, AtomSet, DiscreteMeasure, ReturnDistFn, SupportMap};
use crate::projections::project_simplex;
use crate::td::{categorical_td_run, ewp_td_run, make_schedule, StateSampler, TdConfig, TdReport};

pub const CONFIG_FORMAT: &str = "mvdrl-config/1";
pub const REPORT_FORMAT: &str = "mvdrl-report/1";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_ENGINE: i32 = 3;

const STREAM_MDP: u64 = 1;
const STREAM_SUPPORT: u64 = 2;
const STREAM_ENGINE: u64 = 3;
const STREAM_ORACLE: u64 = 4;
const STREAM_REWARDS: u64 = 5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    #[default]
    DpCat,
    DpEwp,
    TdCat,
    TdEwp,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MdpSource {
    #[default]
    Random,
    File,
    Dsm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MdpConfig {
    pub source: MdpSource,
    pub n_states: usize,
    /// cumulant dimension; equals `n_states` for `dsm`
    pub d: usize,
    pub gamma: f64,
    pub r_max: f64,
    /// symmetric Dirichlet concentration of random transition rows
    pub concentration: f64,
    pub path: Option<PathBuf>,
    /// fixed transition matrix for `dsm` (random rows otherwise)
    pub transition: Option<Vec<Vec<f64>>>,
}

impl Default for MdpConfig {
    fn default() -> Self {
        Self {
            source: MdpSource::Random,
            n_states: 5,
            d: 2,
            gamma: 0.9,
            r_max: 1.0,
            concentration: 1.0,
            path: None,
            transition: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    pub alpha: f64,
    /// reference point; zeros when absent
    pub y0: Option<Vec<f64>>,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self { alpha: 1.0, y0: None }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SupportKind {
    #[default]
    Grid,
    Simplex,
    Random,
    File,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupportConfig {
    pub kind: SupportKind,
    /// total atom count (grid: a perfect d-th power; random: required)
    pub m: Option<usize>,
    /// grid points per axis (default 8)
    pub per_axis: Option<usize>,
    /// simplex grid resolution (default 10)
    pub resolution: Option<usize>,
    /// grid / random box, default `[0, r_max / (1 − γ)]`
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub exponent: f64,
    pub scale: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { exponent: 0.6, scale: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    #[default]
    Uniform,
    Trajectory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// DP stopping tolerance on successive sup-MMD
    pub tol: f64,
    pub max_iter: usize,
    /// particles per state (dp-ewp, td-ewp)
    pub particles: usize,
    /// dp-ewp iteration count; `⌈log m / log γ^{−α}⌉` when absent
    pub iterations: Option<usize>,
    /// record the exact-backup diagnostic in dp-ewp
    pub diagnostics: bool,
    pub steps: u64,
    /// TD report interval; `steps / 100` when absent
    pub report_every: Option<u64>,
    pub sampler: SamplerKind,
    pub start_state: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 1000,
            particles: 64,
            iterations: None,
            diagnostics: false,
            steps: 200_000,
            report_every: None,
            sampler: SamplerKind::Uniform,
            start_state: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub oracle_samples: usize,
    pub tail_tol: f64,
    /// reward vectors per seed for zero-shot evaluation
    pub reward_draws: usize,
    /// restrict reward vectors to the nonnegative orthant
    pub nonnegative: bool,
    /// estimate JSON for zero-shot evaluation; solved in-run when absent
    pub estimate: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            oracle_samples: 10_000,
            tail_tol: 1e-4,
            reward_draws: 10,
            nonnegative: false,
            estimate: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format: String,
    pub algorithm: Algorithm,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    pub mdp: MdpConfig,
    pub kernel: KernelConfig,
    pub support: SupportConfig,
    pub schedule: ScheduleConfig,
    pub run: RunConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            format: CONFIG_FORMAT.to_string(),
            algorithm: Algorithm::default(),
            seeds: (0..100).collect(),
            out: None,
            mdp: MdpConfig::default(),
            kernel: KernelConfig::default(),
            support: SupportConfig::default(),
            schedule: ScheduleConfig::default(),
            run: RunConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.format != CONFIG_FORMAT {
            return Err(Error::Config(format!("unsupported config format {:?}, expected {CONFIG_FORMAT:?}", cfg.format)));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Fills derived fields and checks ranges and referenced files.
    pub fn resolve(mut self) -> Result<Self> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        match self.mdp.source {
            MdpSource::File => {
                let path = self.mdp.path.clone().ok_or_else(|| Error::Config("mdp.path is required for source = \"file\"".into()))?;
                let mdp = load_mdp(&path)?;
                self.mdp.n_states = mdp.n_states();
                self.mdp.d = mdp.dim();
                self.mdp.gamma = mdp.gamma();
                self.mdp.r_max = mdp.r_max();
            }
            MdpSource::Dsm => {
                if let Some(p) = &self.mdp.transition {
                    self.mdp.n_states = p.len();
                }
                self.mdp.d = self.mdp.n_states;
                self.mdp.r_max = 1.0 - self.mdp.gamma;
            }
            MdpSource::Random => {}
        }
        if self.mdp.n_states == 0 || self.mdp.d == 0 {
            return bad("mdp.n_states and mdp.d must be positive".into());
        }
        if !(0.0..1.0).contains(&self.mdp.gamma) {
            return bad(format!("mdp.gamma = {} must lie in [0, 1)", self.mdp.gamma));
        }
        if !(self.mdp.r_max > 0.0) || !(self.mdp.concentration > 0.0) {
            return bad("mdp.r_max and mdp.concentration must be positive".into());
        }
        if !(self.kernel.alpha > 0.0 && self.kernel.alpha < 2.0) {
            return bad(format!("kernel.alpha = {} must lie in (0, 2)", self.kernel.alpha));
        }
        let y0 = self.kernel.y0.take().unwrap_or_else(|| vec![0.0; self.mdp.d]);
        if y0.len() != self.mdp.d {
            return bad(format!("kernel.y0 has {} coordinates, expected {}", y0.len(), self.mdp.d));
        }
        self.kernel.y0 = Some(y0);
        let bound = self.mdp.r_max / (1.0 - self.mdp.gamma);
        let s = &mut self.support;
        match s.kind {
            SupportKind::Grid => {
                let per_axis = match (s.per_axis, s.m) {
                    (Some(k), _) => k,
                    (None, Some(m)) => integer_root(m, self.mdp.d)
                        .ok_or_else(|| Error::Config(format!("support.m = {m} is not a perfect power of d = {}", self.mdp.d)))?,
                    (None, None) => 8,
                };
                if per_axis == 0 {
                    return bad("support.per_axis must be positive".into());
                }
                s.per_axis = Some(per_axis);
                s.m = Some(per_axis.pow(self.mdp.d as u32));
            }
            SupportKind::Simplex => {
                let r = s.resolution.unwrap_or(10);
                if r == 0 {
                    return bad("support.resolution must be positive".into());
                }
                s.resolution = Some(r);
                s.m = Some(AtomSet::simplex_grid(self.mdp.d, r)?.len());
            }
            SupportKind::Random => {
                if s.m.unwrap_or(0) == 0 {
                    return bad("support.m is required for kind = \"random\"".into());
                }
            }
            SupportKind::File => {
                let path = s.path.clone().ok_or_else(|| Error::Config("support.path is required for kind = \"file\"".into()))?;
                if !path.exists() {
                    return bad(format!("support file {} not found", path.display()));
                }
            }
        }
        if matches!(s.kind, SupportKind::Grid | SupportKind::Random) {
            s.lo = Some(s.lo.unwrap_or(0.0));
            s.hi = Some(s.hi.unwrap_or(bound));
            if !(s.hi > s.lo) {
                return bad("support.hi must exceed support.lo".into());
            }
        }
        make_schedule(self.schedule.exponent, self.schedule.scale).map_err(|e| Error::Config(e.to_string()))?;
        if !(self.run.tol > 0.0) || self.run.max_iter == 0 {
            return bad("run.tol must be positive and run.max_iter at least 1".into());
        }
        if self.run.particles == 0 {
            return bad("run.particles must be at least 1".into());
        }
        if self.run.start_state >= self.mdp.n_states {
            return bad(format!("run.start_state = {} out of range", self.run.start_state));
        }
        self.run.report_every = Some(self.run.report_every.unwrap_or((self.run.steps / 100).max(1)));
        if self.run.report_every == Some(0) {
            return bad("run.report_every must be at least 1".into());
        }
        if self.algorithm == Algorithm::DpEwp && self.run.iterations.is_none() {
            self.run.iterations = Some(EwpConfig::default_iterations(self.run.particles, self.mdp.gamma, self.kernel.alpha));
        }
        if self.eval.oracle_samples == 0 || !(self.eval.tail_tol > 0.0) {
            return bad("eval.oracle_samples must be positive and eval.tail_tol positive".into());
        }
        if let Some(p) = &self.eval.estimate {
            if !p.exists() {
                return bad(format!("estimate file {} not found", p.display()));
            }
        }
        Ok(self)
    }

    pub fn kernel_spec(&self) -> Result<KernelSpec> {
        KernelSpec::new(self.kernel.alpha, self.kernel.y0.clone().unwrap_or_else(|| vec![0.0; self.mdp.d]))
    }

    /// The MDP for `seed`; file-based MDPs ignore the seed.
    pub fn build_mdp(&self, seed: u64) -> Result<TabularMdp> {
        let c = &self.mdp;
        let mut rng = RngStream::new(seed, STREAM_MDP).rng();
        match c.source {
            MdpSource::Random => random_mdp(c.n_states, c.d, c.gamma, c.concentration, c.r_max, &mut rng),
            MdpSource::File => load_mdp(c.path.as_deref().expect("resolved")),
            MdpSource::Dsm => {
                let p = match &c.transition {
                    Some(p) => p.clone(),
                    None => random_mdp(c.n_states, 1, c.gamma, c.concentration, 1.0, &mut rng)?.transition().to_vec(),
                };
                dsm_mdp(p, c.gamma)
            }
        }
    }

    pub fn build_support(&self, seed: u64, mdp: &TabularMdp) -> Result<SupportMap> {
        let s = &self.support;
        let n = mdp.n_states();
        let d = mdp.dim();
        let atoms = match s.kind {
            SupportKind::Grid => AtomSet::uniform_grid(d, s.per_axis.unwrap_or(8), s.lo.unwrap_or(0.0), s.hi.unwrap_or(mdp.return_bound()))?,
            SupportKind::Simplex => AtomSet::simplex_grid(d, s.resolution.unwrap_or(10))?,
            SupportKind::Random => {
                let mut rng = RngStream::new(seed, STREAM_SUPPORT).rng();
                AtomSet::random_uniform(d, s.m.unwrap_or(1), s.lo.unwrap_or(0.0), s.hi.unwrap_or(mdp.return_bound()), &mut rng)?
            }
            SupportKind::File => {
                let path = s.path.as_deref().expect("resolved");
                let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
                return SupportMap::from_json(&text, n);
            }
        };
        SupportMap::shared(atoms, n)
    }

    fn td_config(&self) -> Result<TdConfig> {
        Ok(TdConfig {
            steps: self.run.steps,
            schedule: make_schedule(self.schedule.exponent, self.schedule.scale)?,
            sampler: match self.run.sampler {
                SamplerKind::Uniform => StateSampler::Uniform,
                SamplerKind::Trajectory => StateSampler::Trajectory { start: self.run.start_state },
            },
            report_every: self.run.report_every.unwrap_or(1),
        })
    }
}

fn integer_root(m: usize, d: usize) -> Option<usize> {
    let k = (m as f64).powf(1.0 / d as f64).round() as usize;
    (k.checked_pow(d as u32) == Some(m)).then_some(k)
}

fn load_mdp(path: &Path) -> Result<TabularMdp> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    TabularMdp::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Failure carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn config(e: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: e.to_string(),
        }
    }

    fn engine(e: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_ENGINE,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Errors from building inputs are configuration errors; everything raised
/// while an engine runs is a diagnostic.
trait Classify<T> {
    fn setup(self) -> CliResult<T>;
    fn engine(self) -> CliResult<T>;
}

impl<T> Classify<T> for Result<T> {
    fn setup(self) -> CliResult<T> {
        self.map_err(CliError::config)
    }

    fn engine(self) -> CliResult<T> {
        self.map_err(|e| match e {
            Error::Io(_) => CliError::config(e),
            other => CliError::engine(other),
        })
    }
}

#[derive(Parser, Debug)]
#[command(name = "mvdrl", version, about = "Multivariate distributional RL experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML experiment configuration
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// run this single seed instead of the configured list
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// worker threads (default: all cores)
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Run the configured engine for every seed
    Run,
    /// Print the table showing the simplex projection is not affine
    CertNonaffine,
    /// Compare zero-shot scalar return predictions against Monte-Carlo truth
    ZeroshotEval,
    /// Write the configured MDP as JSON
    GenMdp,
    /// Report support mesh and fixed-point accuracy bounds
    MeshReport,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return EXIT_CONFIG;
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn execute(cli: &Cli) -> CliResult<()> {
    if cli.command == Command::CertNonaffine {
        return cmd_cert_nonaffine(cli.out.as_deref());
    }
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).setup()?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &cli.out {
        cfg.out = Some(o.clone());
    }
    let cfg = cfg.resolve().setup()?;
    match cli.command {
        Command::Run => cmd_run(&cfg),
        Command::ZeroshotEval => cmd_zeroshot(&cfg),
        Command::GenMdp => cmd_gen_mdp(&cfg),
        Command::MeshReport => cmd_mesh_report(&cfg),
        Command::CertNonaffine => unreachable!(),
    }
}

fn out_dir(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("mvdrl-out"));
    fs::create_dir_all(&dir).map_err(|e| CliError::config(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::config(format!("cannot write {}: {e}", path.display())))
}

/// 17 significant digits, as in every CSV.
fn f17(v: f64) -> String {
    format!("{v:.16e}")
}

struct SeedOutcome {
    seed: u64,
    files: Vec<(String, Vec<u8>)>,
    summary: serde_json::Value,
    failure: Option<String>,
}

fn dp_series(rep: &DpReport) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut series = Vec::new();
    rep.write_csv(&mut series, false)?;
    let mut timing = Vec::new();
    rep.write_csv(&mut timing, true)?;
    Ok((series, timing))
}

fn td_series(rep: &TdReport) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    rep.write_csv(&mut buf)?;
    Ok(buf)
}

fn run_seed(cfg: &ExperimentConfig, seed: u64) -> CliResult<SeedOutcome> {
    let mdp = cfg.build_mdp(seed).setup()?;
    let spec = cfg.kernel_spec().setup()?;
    let engine_rng = RngStream::new(seed, STREAM_ENGINE);
    let mut files = vec![(format!("mdp_seed{seed}.json"), mdp.to_json().setup()?.into_bytes())];
    let mut failure = None;
    let (estimate, summary) = match cfg.algorithm {
        Algorithm::DpCat => {
            let support = cfg.build_support(seed, &mdp).setup()?;
            let rep = categorical_dp_solve(&mdp, &support, &spec, cfg.run.tol, cfg.run.max_iter).engine()?;
            let (series, timing) = dp_series(&rep).engine()?;
            files.push((format!("series_seed{seed}.csv"), series));
            files.push((format!("timing_seed{seed}.csv"), timing));
            if !rep.converged {
                failure = Some(format!("seed {seed}: no convergence to {} within {} iterations", cfg.run.tol, cfg.run.max_iter));
            }
            let summary = json!({
                "seed": seed,
                "iterations": rep.iterations,
                "converged": rep.converged,
                "final_sup_mmd": rep.distances.last().copied(),
            });
            (rep.estimate, summary)
        }
        Algorithm::DpEwp => {
            let ewp = EwpConfig {
                m: cfg.run.particles,
                iterations: cfg.run.iterations,
                seed,
            };
            let rep = ewp_random_solve(&mdp, &ewp, &spec, None, cfg.run.diagnostics).engine()?;
            let (series, timing) = dp_series(&rep).engine()?;
            files.push((format!("series_seed{seed}.csv"), series));
            files.push((format!("timing_seed{seed}.csv"), timing));
            if cfg.run.diagnostics {
                let mut diag = String::from("iteration,exact_backup_gap\n");
                for (k, v) in rep.diagnostics.iter().enumerate() {
                    diag.push_str(&format!("{},{}\n", k + 1, f17(*v)));
                }
                files.push((format!("diagnostics_seed{seed}.csv"), diag.into_bytes()));
            }
            let summary = json!({
                "seed": seed,
                "iterations": rep.iterations,
                "final_sup_mmd": rep.distances.last().copied(),
            });
            (rep.estimate, summary)
        }
        Algorithm::TdCat => {
            let support = cfg.build_support(seed, &mdp).setup()?;
            let reference = signed_dp_solve(&mdp, &support, &spec, cfg.run.tol, cfg.run.max_iter).engine()?;
            if !reference.converged {
                failure = Some(format!("seed {seed}: signed reference did not converge"));
            }
            let run = categorical_td_run(&mdp, &support, &spec, &cfg.td_config().setup()?, Some(&reference.estimate), &engine_rng).engine()?;
            files.push((format!("series_seed{seed}.csv"), td_series(&run.report).engine()?));
            let summary = json!({
                "seed": seed,
                "steps": run.state.t,
                "visits": run.state.visits,
                "final_sup_mmd_to_reference": run.report.distances.last().copied(),
            });
            (run.state.estimate, summary)
        }
        Algorithm::TdEwp => {
            let oracle = mc_oracle_fn(&mdp, cfg.eval.oracle_samples, cfg.eval.tail_tol, &RngStream::new(seed, STREAM_ORACLE)).engine()?;
            let run = ewp_td_run(&mdp, cfg.run.particles, &spec, &cfg.td_config().setup()?, Some(&oracle), &engine_rng).engine()?;
            files.push((format!("series_seed{seed}.csv"), td_series(&run.report).engine()?));
            let summary = json!({
                "seed": seed,
                "steps": run.state.t,
                "visits": run.state.visits,
                "final_sup_mmd_to_reference": run.report.distances.last().copied(),
            });
            (run.state.estimate, summary)
        }
    };
    files.push((format!("estimate_seed{seed}.json"), estimate.to_json().engine()?.into_bytes()));
    Ok(SeedOutcome {
        seed,
        files,
        summary,
        failure,
    })
}

fn finish(dir: &Path, outcomes: Vec<SeedOutcome>, summary: serde_json::Value) -> CliResult<()> {
    for o in &outcomes {
        for (name, bytes) in &o.files {
            write_file(&dir.join(name), bytes)?;
        }
    }
    let text = serde_json::to_string_pretty(&summary).map_err(CliError::engine)?;
    write_file(&dir.join("summary.json"), text.as_bytes())?;
    let failures: Vec<&str> = outcomes.iter().filter_map(|o| o.failure.as_deref()).collect();
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::engine(failures.join("; ")))
    }
}

fn cmd_run(cfg: &ExperimentConfig) -> CliResult<()> {
    let dir = out_dir(cfg)?;
    let outcomes: Vec<SeedOutcome> = cfg.seeds.par_iter().map(|&s| run_seed(cfg, s)).collect::<CliResult<_>>()?;
    let summary = json!({
        "format": REPORT_FORMAT,
        "command": "run",
        "config": cfg,
        "seeds": outcomes.iter().map(|o| o.summary.clone()).collect::<Vec<_>>(),
    });
    for o in &outcomes {
        println!("seed {}: {}", o.seed, o.summary);
    }
    finish(&dir, outcomes, summary)
}

/// Reward weights for zero-shot evaluation: uniform on the unit sphere,
/// optionally folded into the nonnegative orthant.
pub fn sample_reward_weights(d: usize, count: usize, nonnegative: bool, rng: &RngStream) -> Vec<Vec<f64>> {
    let mut r = rng.rng();
    (0..count)
        .map(|_| loop {
            let mut w: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut r)).collect();
            let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                w.iter_mut().for_each(|v| *v = if nonnegative { v.abs() } else { *v } / norm);
                break w;
            }
        })
        .collect()
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn cmd_zeroshot(cfg: &ExperimentConfig) -> CliResult<()> {
    let dir = out_dir(cfg)?;
    let spec = cfg.kernel_spec().setup()?;
    let estimate_file = match &cfg.eval.estimate {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(CliError::config)?;
            Some(ReturnDistFn::from_json(&text).setup()?)
        }
        None => None,
    };
    let rows = cfg
        .seeds
        .par_iter()
        .map(|&seed| -> CliResult<Vec<(u64, usize, Vec<f64>, f64, f64)>> {
            let mdp = cfg.build_mdp(seed).setup()?;
            let estimate = match &estimate_file {
                Some(e) => {
                    if e.n_states() != mdp.n_states() || e.dim() != mdp.dim() {
                        return Err(CliError::config("estimate file does not match the MDP"));
                    }
                    e.clone()
                }
                None => {
                    let support = cfg.build_support(seed, &mdp).setup()?;
                    categorical_dp_solve(&mdp, &support, &spec, cfg.run.tol, cfg.run.max_iter).engine()?.estimate
                }
            };
            let oracle = mc_oracle_fn(&mdp, cfg.eval.oracle_samples, cfg.eval.tail_tol, &RngStream::new(seed, STREAM_ORACLE)).engine()?;
            let ws = sample_reward_weights(mdp.dim(), cfg.eval.reward_draws, cfg.eval.nonnegative, &RngStream::new(seed, STREAM_REWARDS));
            ws.into_iter()
                .enumerate()
                .map(|(i, w)| {
                    let errs = zeroshot_errors(&estimate, &oracle, &w, &spec).engine()?;
                    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
                    let worst = errs.iter().copied().fold(0.0, f64::max);
                    Ok((seed, i, w, mean, worst))
                })
                .collect()
        })
        .collect::<CliResult<Vec<_>>>()?
        .concat();
    let d = cfg.mdp.d;
    let mut csv = String::from("seed,draw");
    for k in 0..d {
        csv.push_str(&format!(",w{k}"));
    }
    csv.push_str(",cramer_mean,cramer_max\n");
    for (seed, i, w, mean, worst) in &rows {
        csv.push_str(&format!("{seed},{i}"));
        for v in w {
            csv.push_str(&format!(",{}", f17(*v)));
        }
        csv.push_str(&format!(",{},{}\n", f17(*mean), f17(*worst)));
    }
    write_file(&dir.join("zeroshot.csv"), csv.as_bytes())?;
    let mut errs: Vec<f64> = rows.iter().map(|r| r.3).collect();
    errs.sort_by(f64::total_cmp);
    let (median, mean) = if errs.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        (quantile(&errs, 0.5), errs.iter().sum::<f64>() / errs.len() as f64)
    };
    let (lo, hi) = if errs.is_empty() { (f64::NAN, f64::NAN) } else { (quantile(&errs, 0.025), quantile(&errs, 0.975)) };
    let agg = format!(
        "rows,mean,median,q025,q975\n{},{},{},{},{}\n",
        errs.len(),
        f17(mean),
        f17(median),
        f17(lo),
        f17(hi)
    );
    write_file(&dir.join("zeroshot_summary.csv"), agg.as_bytes())?;
    print!("{agg}");
    let summary = json!({
        "format": REPORT_FORMAT,
        "command": "zeroshot-eval",
        "config": cfg,
        "rows": errs.len(),
        "median_cramer": median,
    });
    let text = serde_json::to_string_pretty(&summary).map_err(CliError::engine)?;
    write_file(&dir.join("summary.json"), text.as_bytes())
}

fn cmd_gen_mdp(cfg: &ExperimentConfig) -> CliResult<()> {
    let dir = out_dir(cfg)?;
    for &seed in &cfg.seeds {
        let mdp = cfg.build_mdp(seed).setup()?;
        let path = dir.join(format!("mdp_seed{seed}.json"));
        write_file(&path, mdp.to_json().setup()?.as_bytes())?;
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_mesh_report(cfg: &ExperimentConfig) -> CliResult<()> {
    let dir = out_dir(cfg)?;
    let spec = cfg.kernel_spec().setup()?;
    let mut csv = String::from("seed,mesh,bound,closed_form,exact\n");
    for &seed in &cfg.seeds {
        let mdp = cfg.build_mdp(seed).setup()?;
        let support = cfg.build_support(seed, &mdp).setup()?;
        let rep = mesh_and_bound(&support, &mdp, &spec).setup()?;
        let closed = rep.closed_form.map(f17).unwrap_or_default();
        csv.push_str(&format!("{seed},{},{},{closed},{}\n", f17(rep.mesh), f17(rep.bound), rep.exact));
    }
    write_file(&dir.join("mesh_report.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

/// The two sides of the non-affinity certificate on the grid `{0,…,3}²`.
#[derive(Clone, Debug)]
pub struct CertTable {
    pub atoms: AtomSet,
    /// `Π(λ p₁ + (1−λ) p₂)`
    pub q1: Vec<f64>,
    /// `λ Π p₁ + (1−λ) Π p₂`
    pub q2: Vec<f64>,
    pub mmd: f64,
}

/// `λ = 0.8`, `p₁ = δ_(1.5,1.5)`, `p₂ = δ_(2.5,0)`, energy kernel with `α = 1`.
pub fn cert_nonaffine() -> Result<CertTable> {
    let lambda = 0.8;
    let atoms = AtomSet::uniform_grid(2, 4, 0.0, 3.0)?;
    let spec = KernelSpec::energy(1.0, 2)?;
    let p1 = DiscreteMeasure::dirac(&[1.5, 1.5])?;
    let p2 = DiscreteMeasure::dirac(&[2.5, 0.0])?;
    let mix = mixture(&[(lambda, &p1), (1.0 - lambda, &p2)])?;
    let q1 = project_simplex(&mix, &atoms, &spec)?;
    let a = project_simplex(&p1, &atoms, &spec)?;
    let b = project_simplex(&p2, &atoms, &spec)?;
    let q2w: Vec<f64> = a.weights().iter().zip(b.weights()).map(|(u, v)| lambda * u + (1.0 - lambda) * v).collect();
    let q2 = DiscreteMeasure::new(atoms.clone(), q2w)?;
    let mmd = mmd(&q1, &q2, &spec)?;
    Ok(CertTable {
        atoms,
        q1: q1.weights().to_vec(),
        q2: q2.weights().to_vec(),
        mmd,
    })
}

impl CertTable {
    /// `x,y,q1,q2` rows followed by the MMD.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x,y,q1,q2")?;
        for (i, z) in self.atoms.iter().enumerate() {
            writeln!(w, "{},{},{},{}", z[0], z[1], f17(self.q1[i]), f17(self.q2[i]))?;
        }
        writeln!(w, "mmd,{}", f17(self.mmd))?;
        Ok(())
    }
}

fn cmd_cert_nonaffine(out: Option<&Path>) -> CliResult<()> {
    let table = cert_nonaffine().engine()?;
    println!("{:>8}  {:>8}  {:>8}", "atom", "q1", "q2");
    for (i, z) in table.atoms.iter().enumerate() {
        println!("({}, {})  {:>8.4}  {:>8.4}", z[0], z[1], table.q1[i], table.q2[i]);
    }
    println!("mmd(q1, q2) = {:.6}", table.mmd);
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(CliError::config)?;
        let mut buf = Vec::new();
        table.write_csv(&mut buf).engine()?;
        write_file(&dir.join("cert_nonaffine.csv"), &buf)?;
    }
    Ok(())
}
