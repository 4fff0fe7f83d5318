//! Experiment orchestration: declarative TOML configs, content-addressed run
//! directories, method × budget tables and γ ablation sweeps.
//!
//! A run lives in `<root>/<hash>/` where `hash` is derived from the parsed
//! config. The root comes from `SHARPEULER_RUN_ROOT` (default `runs`).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::{calibrate_from_trace, run_reference_trajectories, ShapeParams, SharpnessProfile};
use crate::datasets::{sample, sample_base, Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::field::VelocityField;
use crate::grid::Grid;
use crate::metrics::{density_coverage, evaluate, SinkhornConfig, SinkhornStatus};
use crate::rng::derive_seed;
use crate::sampler::euler_sample;
use crate::schedule::{sharp_schedule_from_profile, shifted_schedule, uniform_schedule, Schedule};
use crate::stats::{mean, std_dev};
use crate::tinyflow::{analytic_field, train, Checkpoint, MlpField, TrainConfig, TrainReport};

pub const RUN_ROOT_ENV: &str = "SHARPEULER_RUN_ROOT";

/// Run root from the environment, `runs` when unset.
pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// A sampling schedule family as named in configs: `uniform`,
/// `shifted:ALPHA` or `sharp:GAMMA` (calibrated profile shaped with γ).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Uniform,
    Shifted(f64),
    Sharp(f64),
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let num = |v: &str| {
            v.parse::<f64>()
                .ok()
                .filter(|x| *x > 0.0 && x.is_finite())
                .ok_or_else(|| Error::Config(format!("method `{s}` needs a positive number")))
        };
        match s.split_once(':') {
            None if s == "uniform" => Ok(Method::Uniform),
            Some(("shifted", a)) => num(a).map(Method::Shifted),
            Some(("sharp", g)) => num(g).map(Method::Sharp),
            _ => Err(Error::Config(format!(
                "unknown method `{s}` (expected uniform, shifted:ALPHA or sharp:GAMMA)"
            ))),
        }
    }
}

impl TryFrom<String> for Method {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Uniform => write!(f, "uniform"),
            Method::Shifted(a) => write!(f, "shifted:{a}"),
            Method::Sharp(g) => write!(f, "sharp:{g}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
}

/// Where the velocity field comes from. With neither `checkpoint` nor
/// `analytic`, the run directory's `model.json` is used, trained on demand
/// when `train = true`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub checkpoint: Option<PathBuf>,
    pub analytic: Option<String>,
    pub train: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSection {
    pub grid_n: usize,
    pub trajectories: usize,
    pub sigma: f64,
    pub eps_a: f64,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self {
            grid_n: 200,
            trajectories: 256,
            sigma: 1.0,
            eps_a: 1e-8,
        }
    }
}

impl CalibrationSection {
    fn shape(&self, gamma: f64) -> ShapeParams {
        ShapeParams {
            gamma,
            sigma: self.sigma,
            eps_a: self.eps_a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub methods: Vec<Method>,
    pub budgets: Vec<usize>,
    pub seeds: usize,
    pub n_real: usize,
    pub n_gen: usize,
    pub k: usize,
    pub sinkhorn: SinkhornConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            methods: vec![Method::Uniform, Method::Shifted(3.0), Method::Sharp(0.5)],
            budgets: vec![8, 12, 16, 20],
            seeds: 3,
            n_real: 2000,
            n_gen: 2000,
            k: 5,
            sinkhorn: SinkhornConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub gammas: Vec<f64>,
    pub budgets: Vec<usize>,
    pub seeds: usize,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            gammas: vec![0.5, 0.8, 1.0, 1.2, 1.5, 1.7, 2.0],
            budgets: vec![5, 8, 12, 16, 20],
            seeds: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub dataset: Dataset,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub calibration: CalibrationSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub ablation: AblationSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        self.dataset.validate()?;
        if self.model.checkpoint.is_some() && self.model.analytic.is_some() {
            return bad("model: set at most one of `checkpoint` and `analytic`");
        }
        if self.model.train && (self.model.checkpoint.is_some() || self.model.analytic.is_some()) {
            return bad("model: `train = true` cannot be combined with `checkpoint` or `analytic`");
        }
        if let Some(spec) = &self.model.analytic {
            analytic_field(spec)?;
        }
        self.train.validate()?;
        let c = &self.calibration;
        if c.grid_n < 2 || c.trajectories == 0 {
            return bad("calibration: grid_n must be >= 2 and trajectories >= 1");
        }
        c.shape(1.0).validate()?;
        if !(c.eps_a > 0.0) {
            return bad("calibration: eps_a must be positive");
        }
        let e = &self.eval;
        if e.methods.is_empty() || e.budgets.is_empty() || e.budgets.contains(&0) {
            return bad("eval: methods and budgets must be non-empty, budgets >= 1");
        }
        if e.seeds == 0 || e.n_gen == 0 || e.k == 0 || e.n_real <= e.k {
            return bad("eval: need seeds >= 1, n_gen >= 1, k >= 1 and n_real > k");
        }
        if !(e.sinkhorn.eps > 0.0) || !(e.sinkhorn.tol > 0.0) || e.sinkhorn.max_iters == 0 {
            return bad("eval.sinkhorn: eps, tol and max_iters must be positive");
        }
        let a = &self.ablation;
        if a.gammas.is_empty() || a.budgets.is_empty() || a.budgets.contains(&0) || a.seeds == 0 {
            return bad("ablation: gammas, budgets and seeds must be non-empty and positive");
        }
        if a.gammas.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
            return bad("ablation: gammas must be positive");
        }
        Ok(())
    }

    /// Hex digest of the canonical JSON form; identifies the run directory.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn run_dir(&self, root: &Path) -> PathBuf {
        root.join(self.hash())
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Creates the run directory and stores a copy of the config in it.
pub fn prepare_run_dir(config: &ExperimentConfig, root: &Path) -> Result<PathBuf> {
    let dir = config.run_dir(root);
    let text = toml::to_string(config).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
    write(&dir.join("config.toml"), &text)?;
    Ok(dir)
}

pub fn model_path(config: &ExperimentConfig, root: &Path) -> PathBuf {
    config
        .model
        .checkpoint
        .clone()
        .unwrap_or_else(|| config.run_dir(root).join("model.json"))
}

/// Trains the configured model and stores it as the run's checkpoint.
pub fn train_model(config: &ExperimentConfig, root: &Path) -> Result<(PathBuf, TrainReport)> {
    config.validate()?;
    let dir = prepare_run_dir(config, root)?;
    let outcome = train(&config.train, &config.dataset)?;
    let path = model_path(config, root);
    let ckpt = Checkpoint {
        params: outcome.ema,
        train_config: Some(config.train),
        train_report: Some(outcome.report.clone()),
    };
    ckpt.save(&path)?;
    write(&dir.join("train_report.json"), &serde_json::to_string_pretty(&outcome.report)?)?;
    Ok((path, outcome.report))
}

/// Resolves the configured velocity field, training it if the config asks
/// for that and no cached checkpoint exists.
pub fn load_model(config: &ExperimentConfig, root: &Path) -> Result<Box<dyn VelocityField>> {
    if let Some(spec) = &config.model.analytic {
        return Ok(Box::new(analytic_field(spec)?));
    }
    let path = model_path(config, root);
    if !path.exists() {
        if config.model.train {
            train_model(config, root)?;
        } else {
            return Err(Error::MissingCheckpoint { path });
        }
    }
    Ok(Box::new(MlpField::new(Checkpoint::load(&path)?.params)))
}

/// Loads `analytic:SPEC` fields or MLP checkpoints by path.
pub fn load_field(reference: &str) -> Result<Box<dyn VelocityField>> {
    if let Some(spec) = reference.strip_prefix("analytic:") {
        return Ok(Box::new(analytic_field(spec)?));
    }
    let path = Path::new(reference);
    if !path.exists() {
        return Err(Error::MissingCheckpoint { path: path.into() });
    }
    Ok(Box::new(MlpField::new(Checkpoint::load(path)?.params)))
}

/// Calibrated profile with unit γ; other exponents come from
/// [`SharpnessProfile::reshaped`] on the same raw signal.
pub fn calibrate_base_profile(config: &ExperimentConfig, field: &dyn VelocityField) -> Result<SharpnessProfile> {
    let c = &config.calibration;
    let grid = Grid::uniform(c.grid_n)?;
    let trace = run_reference_trajectories(field, &grid, c.trajectories, derive_seed(config.run.seed, "calibration"))?;
    calibrate_from_trace(&trace, &c.shape(1.0))
}

fn gamma_tag(gamma: f64) -> String {
    format!("gamma-{gamma}")
}

/// Writes `profile.csv` (forward time, mass; one row per interval) and
/// `knots_B{budget}.csv` into `dir`.
pub fn export_profile_plot_data(profile: &SharpnessProfile, budget: usize, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let profile_path = dir.join("profile.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["forward_time", "mass"])?;
    for (t, m) in profile.midpoints.iter().zip(&profile.masses) {
        w.serialize((t, m))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    write(&profile_path, &String::from_utf8(bytes).expect("csv is utf-8"))?;
    let knots_path = dir.join(format!("knots_B{budget}.csv"));
    write(&knots_path, &sharp_schedule_from_profile(profile, budget)?.to_csv()?)?;
    Ok((profile_path, knots_path))
}

/// Per-γ profiles derived from one calibration, saved with plot data.
struct Profiles {
    base: SharpnessProfile,
    shaped: Vec<(f64, SharpnessProfile)>,
}

impl Profiles {
    fn build(config: &ExperimentConfig, field: &dyn VelocityField, gammas: &[f64], budgets: &[usize], dir: &Path) -> Result<Self> {
        let base = calibrate_base_profile(config, field)?;
        let mut shaped = Vec::new();
        for &g in gammas {
            if shaped.iter().any(|(h, _)| *h == g) {
                continue;
            }
            let p = base.reshaped(&config.calibration.shape(g))?;
            let pdir = dir.join("profiles");
            fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
            p.save(&pdir.join(format!("{}.json", gamma_tag(g))))?;
            for &b in budgets {
                export_profile_plot_data(&p, b, &pdir.join(gamma_tag(g)))?;
            }
            shaped.push((g, p));
        }
        Ok(Self { base, shaped })
    }

    fn schedule(&self, method: Method, budget: usize) -> Result<Schedule> {
        match method {
            Method::Uniform => uniform_schedule(budget),
            Method::Shifted(a) => shifted_schedule(budget, a),
            Method::Sharp(g) => {
                let p = self
                    .shaped
                    .iter()
                    .find(|(h, _)| *h == g)
                    .map(|(_, p)| p)
                    .ok_or_else(|| Error::Contract(format!("no profile for γ = {g}")))?;
                debug_assert_eq!(p.raw_profile, self.base.raw_profile);
                sharp_schedule_from_profile(p, budget)
            }
        }
    }
}

/// Shared noise and reference data of one replicate.
struct Replicate {
    noise_seed: u64,
    noise: Array2<f64>,
    real: Array2<f64>,
}

fn replicates(config: &ExperimentConfig, count: usize) -> Result<Vec<Replicate>> {
    (0..count)
        .map(|r| {
            let noise_seed = derive_seed(config.run.seed, &format!("noise/{r}"));
            let real_seed = derive_seed(config.run.seed, &format!("real/{r}"));
            Ok(Replicate {
                noise_seed,
                noise: sample_base(config.eval.n_gen, noise_seed),
                real: sample(&DatasetSpec::new(config.dataset.clone(), real_seed), config.eval.n_real)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: String,
    pub budget: usize,
    pub replicate: usize,
    pub seed: u64,
    pub nfe: usize,
    pub density: f64,
    pub coverage: f64,
    pub w2sq: Option<f64>,
    pub sinkhorn_status: Option<SinkhornStatus>,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl Summary {
    fn of(values: Vec<f64>) -> Self {
        Self {
            mean: mean(&values),
            std: std_dev(&values),
            values,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub budget: usize,
    pub nfe: usize,
    pub seeds: Vec<u64>,
    pub density: Summary,
    pub coverage: Summary,
    pub w2sq: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub dataset: String,
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<TableRow>,
}

impl ResultTable {
    pub fn row(&self, method: &str, budget: usize) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.method == method && r.budget == budget)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "method", "budget", "nfe", "density_mean", "density_std", "coverage_mean", "coverage_std",
            "w2sq_mean", "w2sq_std", "seeds", "config_hash", "run_seed",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                r.budget.to_string(),
                r.nfe.to_string(),
                r.density.mean.to_string(),
                r.density.std.to_string(),
                r.coverage.mean.to_string(),
                r.coverage.std.to_string(),
                r.w2sq.mean.to_string(),
                r.w2sq.std.to_string(),
                join_seeds(&r.seeds),
                self.config_hash.clone(),
                self.seed.to_string(),
            ])?;
        }
        csv_string(w)
    }
}

fn join_seeds(seeds: &[u64]) -> String {
    seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";")
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub run_dir: PathBuf,
    pub table: ResultTable,
}

fn sharp_gammas(methods: &[Method]) -> Vec<f64> {
    methods
        .iter()
        .filter_map(|m| match m {
            Method::Sharp(g) => Some(*g),
            _ => None,
        })
        .collect()
}

fn cell_file(dir: &Path, cell: &CellResult) -> PathBuf {
    let slug = cell.method.replace(':', "-");
    dir.join("cells").join(format!("{slug}_B{}_r{}.json", cell.budget, cell.replicate))
}

/// Method × budget table of Density, Coverage and W2², `eval.seeds`
/// replicates per cell. All methods in a replicate share the same noise.
pub fn run_experiment(config: &ExperimentConfig, root: &Path) -> Result<ExperimentOutput> {
    config.validate()?;
    let field = load_model(config, root)?;
    let dir = prepare_run_dir(config, root)?;
    let e = &config.eval;
    let profiles = Profiles::build(config, field.as_ref(), &sharp_gammas(&e.methods), &e.budgets, &dir)?;
    let reps = replicates(config, e.seeds)?;
    let hash = config.hash();

    let mut jobs = Vec::new();
    for &m in &e.methods {
        for &b in &e.budgets {
            for r in 0..e.seeds {
                jobs.push((m, b, r));
            }
        }
    }
    let cells: Vec<CellResult> = jobs
        .par_iter()
        .map(|&(method, budget, r)| {
            let rep = &reps[r];
            let schedule = profiles.schedule(method, budget)?;
            let out = euler_sample(field.as_ref(), &schedule, rep.noise.view())?;
            let report = evaluate(rep.real.view(), out.samples.view(), e.k, &e.sinkhorn, rep.noise_seed)?;
            let cell = CellResult {
                method: method.to_string(),
                budget,
                replicate: r,
                seed: rep.noise_seed,
                nfe: out.nfe,
                density: report.density,
                coverage: report.coverage,
                w2sq: Some(report.w2sq),
                sinkhorn_status: Some(report.sinkhorn.status),
                config_hash: hash.clone(),
            };
            write(&cell_file(&dir, &cell), &serde_json::to_string_pretty(&cell)?)?;
            Ok(cell)
        })
        .collect::<Result<_>>()?;

    let rows = cells
        .chunks(e.seeds)
        .map(|group| TableRow {
            method: group[0].method.clone(),
            budget: group[0].budget,
            nfe: group[0].nfe,
            seeds: group.iter().map(|c| c.seed).collect(),
            density: Summary::of(group.iter().map(|c| c.density).collect()),
            coverage: Summary::of(group.iter().map(|c| c.coverage).collect()),
            w2sq: Summary::of(group.iter().filter_map(|c| c.w2sq).collect()),
        })
        .collect();
    let table = ResultTable {
        dataset: config.dataset.name().into(),
        config_hash: hash,
        seed: config.run.seed,
        rows,
    };
    write(&dir.join("table.json"), &serde_json::to_string_pretty(&table)?)?;
    write(&dir.join("table.csv"), &table.to_csv()?)?;
    Ok(ExperimentOutput { run_dir: dir, table })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub gamma: f64,
    pub budget: usize,
    pub nfe: usize,
    pub density: Summary,
    pub coverage: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCurves {
    pub dataset: String,
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationCurves {
    pub fn row(&self, gamma: f64, budget: usize) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.gamma == gamma && r.budget == budget)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "dataset", "gamma", "budget", "nfe", "density_mean", "density_std", "coverage_mean",
            "coverage_std", "config_hash", "run_seed",
        ])?;
        for r in &self.rows {
            w.write_record([
                self.dataset.clone(),
                r.gamma.to_string(),
                r.budget.to_string(),
                r.nfe.to_string(),
                r.density.mean.to_string(),
                r.density.std.to_string(),
                r.coverage.mean.to_string(),
                r.coverage.std.to_string(),
                self.config_hash.clone(),
                self.seed.to_string(),
            ])?;
        }
        csv_string(w)
    }
}

#[derive(Debug, Clone)]
pub struct AblationOutput {
    pub run_dir: PathBuf,
    pub curves: AblationCurves,
}

/// Density and Coverage of sharp schedules over the γ × budget grid in
/// `[ablation]`. The trajectories are calibrated once and reshaped per γ.
pub fn gamma_ablation(config: &ExperimentConfig, root: &Path) -> Result<AblationOutput> {
    config.validate()?;
    let field = load_model(config, root)?;
    let dir = prepare_run_dir(config, root)?;
    let a = &config.ablation;
    let profiles = Profiles::build(config, field.as_ref(), &a.gammas, &a.budgets, &dir)?;
    let reps = replicates(config, a.seeds)?;
    let k = config.eval.k;

    let mut jobs = Vec::new();
    for &g in &a.gammas {
        for &b in &a.budgets {
            for r in 0..a.seeds {
                jobs.push((g, b, r));
            }
        }
    }
    let cells: Vec<(usize, f64, f64)> = jobs
        .par_iter()
        .map(|&(g, b, r)| {
            let schedule = profiles.schedule(Method::Sharp(g), b)?;
            let out = euler_sample(field.as_ref(), &schedule, reps[r].noise.view())?;
            let (d, c) = density_coverage(reps[r].real.view(), out.samples.view(), k)?;
            Ok((out.nfe, d, c))
        })
        .collect::<Result<_>>()?;
    let rows = jobs
        .chunks(a.seeds)
        .zip(cells.chunks(a.seeds))
        .map(|(j, c)| AblationRow {
            gamma: j[0].0,
            budget: j[0].1,
            nfe: c[0].0,
            density: Summary::of(c.iter().map(|x| x.1).collect()),
            coverage: Summary::of(c.iter().map(|x| x.2).collect()),
        })
        .collect();
    let curves = AblationCurves {
        dataset: config.dataset.name().into(),
        config_hash: config.hash(),
        seed: config.run.seed,
        rows,
    };
    write(&dir.join("ablation.json"), &serde_json::to_string_pretty(&curves)?)?;
    write(&dir.join("ablation.csv"), &curves.to_csv()?)?;
    Ok(AblationOutput { run_dir: dir, curves })
}
