//! Repeated-trial experiments: sample a dataset, run the dynamics, measure
//! the gap, assemble bounds, aggregate coverage.
//!
//! Trial `t` draws everything from `derive_seed(master_seed, t)`. The
//! dataset uses stream 0 of that seed and replicate `r` uses stream
//! `r + 1`, so results do not depend on the thread count.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::bounds::{
    baseline_pac_bayes, baseline_rademacher, cld_upper_brownian, covering_upper, fractal_upper, lower_bound,
    pacbayes_rademacher_upper, pacbayes_rademacher_upper_closed, sgld_upper, BoundReport, FormulaId, Lambda, Side,
    Term, DEFAULT_RESIDUAL_CONSTANT,
};
use crate::complexity::{
    covering_curve, csv_err, fit_box_dimension, pseudometric_matrix, rademacher_mc, CoveringCurve, DimensionFit,
    DistanceMatrix, FarthestPointOrder, Geometry, LossMatrix, Metric,
};
use crate::dynamics::{
    kl_brownian_prior, kl_sgld, log_radon_nikodym_sgld, run_cld_euler, run_sgld, BatchSize, SgldConfig, Trajectory,
};
use crate::error::{Error, Result};
use crate::problem::{gen_gap_sup, sample_dataset, DataDistribution, Dataset, LossModel};
use crate::rng::derive_seed;

pub const CONFIG_SCHEMA: &str = "v1";
pub const DEFAULT_REPLICATES: usize = 64;
pub const DEFAULT_POPULATION_ATOMS: usize = 4096;
/// Environment variable overriding the worker count.
pub const THREADS_ENV: &str = "RANDSET_THREADS";

/// Every configuration key as `(key, type, default, description)`.
pub const CONFIG_KEYS: &[(&str, &str, &str, &str)] = &[
    ("schema", "string", "\"v1\"", "config schema version"),
    ("master_seed", "u64", "required", "root of all randomness"),
    ("distribution", "object", "required", "data distribution, tagged by \"kind\""),
    ("distribution.kind", "string", "required", "finite_support | gaussian_mixture | linear_regression"),
    ("population_atoms", "usize", "4096", "atoms used to materialize a parametric distribution"),
    ("loss", "object", "required", "loss model, tagged by \"kind\""),
    ("loss.kind", "string", "required", "clipped_quadratic | clipped_logistic | constant"),
    ("loss.bound", "f64", "required", "loss bound B"),
    ("loss.margin", "f64", "required (clipped)", "width of the smooth clipping ramp"),
    ("loss.input_radius", "f64", "none", "project inputs onto this ball; enables the Lipschitz constant"),
    ("loss.value", "f64", "required (constant)", "value of the constant loss"),
    ("n", "usize", "required", "dataset size"),
    ("pipeline", "string", "\"sgld\"", "sgld (set W_1..W_T) | cld (full batch, set W_0..W_T)"),
    ("dynamics.iterations", "usize", "required", "number of steps T"),
    ("dynamics.eta", "f64 | [f64]", "required", "constant step or full schedule"),
    ("dynamics.beta", "f64", "required", "inverse temperature"),
    ("dynamics.batch_size", "usize | \"full\"", "\"full\"", "minibatch size, drawn with replacement"),
    ("dynamics.w0", "[f64]", "zeros", "initial weights"),
    ("dynamics.noiseless", "bool", "false", "run with sigma = 0"),
    ("bounds", "[object]", "[]", "bound selections"),
    ("bounds[].formula", "string", "required", "formula identifier"),
    ("bounds[].lambda", "f64 | \"optimize\"", "\"optimize\"", "free parameter lambda"),
    ("bounds[].zeta", "f64", "required", "failure probability"),
    ("bounds[].gamma", "f64", "required (fractal)", "extra failure probability"),
    ("bounds[].constant", "f64", "1.125", "absolute-constant knob"),
    ("bounds[].delta", "f64", "required (covering)", "covering scale"),
    ("bounds[].eps", "f64", "required (fractal)", "dimension slack"),
    ("trials", "usize", "required", "number of trials M"),
    ("replicates", "usize", "64", "trajectories per dataset R"),
    ("sign_draws", "usize", "0", "Rademacher sign draws per replicate (0 disables)"),
    ("fractal", "object", "none", "covering curve and dimension fit on replicate 0"),
    ("fractal.scales", "[f64] | {start, ratio, count}", "required", "strictly decreasing scales"),
    ("fractal.metric", "string", "required", "euclidean | data_dependent"),
    ("fractal.window", "[usize; 2]", "middle half", "index range of the fit"),
    ("threads", "usize", "all cores", "worker count (RANDSET_THREADS wins)"),
    ("output", "string", "none", "JSON-lines results path"),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpec {
    ClippedQuadratic {
        bound: f64,
        margin: f64,
        #[serde(default)]
        input_radius: Option<f64>,
    },
    ClippedLogistic {
        bound: f64,
        margin: f64,
        #[serde(default)]
        input_radius: Option<f64>,
    },
    Constant {
        value: f64,
        bound: f64,
    },
}

impl LossSpec {
    pub fn build(&self) -> Result<LossModel<f64>> {
        match *self {
            LossSpec::ClippedQuadratic {
                bound,
                margin,
                input_radius,
            } => LossModel::clipped_quadratic(bound, margin, input_radius),
            LossSpec::ClippedLogistic {
                bound,
                margin,
                input_radius,
            } => LossModel::clipped_logistic(bound, margin, input_radius),
            LossSpec::Constant { value, bound } => LossModel::constant(value, bound),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    #[default]
    Sgld,
    Cld,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepSpec {
    Constant(f64),
    Schedule(Vec<f64>),
}

fn full_batch() -> BatchSize {
    BatchSize::FULL
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsSpec {
    pub iterations: usize,
    pub eta: StepSpec,
    pub beta: f64,
    #[serde(default = "full_batch")]
    pub batch_size: BatchSize,
    #[serde(default)]
    pub w0: Option<Vec<f64>>,
    #[serde(default)]
    pub noiseless: bool,
}

impl DynamicsSpec {
    pub fn sgld_config(&self, dim: usize, seed: u64) -> SgldConfig<f64> {
        let eta = match &self.eta {
            StepSpec::Constant(e) => vec![*e; self.iterations],
            StepSpec::Schedule(s) => s.clone(),
        };
        SgldConfig {
            iterations: self.iterations,
            eta,
            beta: self.beta,
            batch_size: self.batch_size,
            w0: self.w0.clone().unwrap_or_else(|| vec![0.0; dim]),
            seed,
            noiseless: self.noiseless,
        }
    }
}

fn optimize() -> Lambda<f64> {
    Lambda::Optimize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundSelection {
    pub formula: FormulaId,
    #[serde(default = "optimize")]
    pub lambda: Lambda<f64>,
    pub zeta: f64,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub constant: Option<f64>,
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub eps: Option<f64>,
}

impl BoundSelection {
    pub fn new(formula: FormulaId, zeta: f64) -> Self {
        Self {
            formula,
            lambda: Lambda::Optimize,
            zeta,
            gamma: None,
            constant: None,
            delta: None,
            eps: None,
        }
    }

    fn needs_rademacher(&self) -> bool {
        matches!(
            self.formula,
            FormulaId::RademacherUpper
                | FormulaId::RademacherUpperClosed
                | FormulaId::RademacherLower
                | FormulaId::CldBrownianUpper
                | FormulaId::BaselineRademacher
        )
    }

    fn covering_metric(&self) -> Option<Metric> {
        match self.formula {
            FormulaId::CoveringDataDependent => Some(Metric::DataDependent),
            FormulaId::CoveringEuclidean => Some(Metric::Euclidean),
            _ => None,
        }
    }

    fn fractal_metric(&self) -> Option<Metric> {
        match self.formula {
            FormulaId::FractalDataDependent => Some(Metric::DataDependent),
            FormulaId::FractalEuclidean => Some(Metric::Euclidean),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScaleSpec {
    List(Vec<f64>),
    Geometric { start: f64, ratio: f64, count: usize },
}

impl ScaleSpec {
    pub fn scales(&self) -> Vec<f64> {
        match self {
            ScaleSpec::List(v) => v.clone(),
            ScaleSpec::Geometric { start, ratio, count } => {
                (0..*count).map(|i| start * ratio.powi(i as i32)).collect()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FractalSpec {
    pub scales: ScaleSpec,
    pub metric: Metric,
    #[serde(default)]
    pub window: Option<[usize; 2]>,
}

fn schema_v1() -> String {
    CONFIG_SCHEMA.into()
}

fn default_replicates() -> usize {
    DEFAULT_REPLICATES
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "schema_v1")]
    pub schema: String,
    pub master_seed: u64,
    pub distribution: DataDistribution<f64>,
    #[serde(default)]
    pub population_atoms: Option<usize>,
    pub loss: LossSpec,
    pub n: usize,
    #[serde(default)]
    pub pipeline: Pipeline,
    pub dynamics: DynamicsSpec,
    #[serde(default)]
    pub bounds: Vec<BoundSelection>,
    pub trials: usize,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub sign_draws: usize,
    #[serde(default)]
    pub fractal: Option<FractalSpec>,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub output: Option<String>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != CONFIG_SCHEMA {
            return Err(Error::Config(format!(
                "unsupported schema {:?}, expected {CONFIG_SCHEMA:?}",
                self.schema
            )));
        }
        self.distribution.validate()?;
        let model = self.loss.build()?;
        if self.n == 0 {
            return Err(Error::Config("n must be >= 1".into()));
        }
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be >= 1".into()));
        }
        if self.population_atoms == Some(0) {
            return Err(Error::Config("population_atoms must be >= 1".into()));
        }
        let probe = self.dynamics.sgld_config(self.distribution.dimension(), 0);
        probe.validate(self.n)?;
        if probe.w0.len() != self.distribution.dimension() {
            return Err(Error::Config(format!(
                "dynamics.w0 has length {}, data dimension is {}",
                probe.w0.len(),
                self.distribution.dimension()
            )));
        }
        if let Some(f) = &self.fractal {
            let s = f.scales.scales();
            if s.is_empty() || s.windows(2).any(|w| !(w[1] < w[0])) || s.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::Config("fractal.scales must be positive and strictly decreasing".into()));
            }
        }
        for (i, b) in self.bounds.iter().enumerate() {
            let at = |m: &str| Error::Config(format!("bounds[{i}] ({:?}): {m}", b.formula));
            if !(b.zeta > 0.0 && b.zeta < 1.0) {
                return Err(at("zeta must lie in (0,1)"));
            }
            if b.needs_rademacher() && self.sign_draws == 0 {
                return Err(at("needs sign_draws >= 1"));
            }
            if b.formula == FormulaId::CldBrownianUpper && self.pipeline != Pipeline::Cld {
                return Err(at("needs pipeline = cld"));
            }
            if matches!(b.formula, FormulaId::GenericSubgaussian | FormulaId::MgfFiniteUpper) {
                return Err(at("formula has no experiment pipeline; evaluate it directly"));
            }
            if b.covering_metric().is_some() && !b.delta.is_some_and(|d| d >= 0.0) {
                return Err(at("needs delta >= 0"));
            }
            if let Some(m) = b.fractal_metric() {
                match &self.fractal {
                    Some(f) if f.metric == m => {}
                    _ => return Err(at("needs a fractal section with the matching metric")),
                }
                if b.eps.is_none() || b.gamma.is_none() {
                    return Err(at("needs eps and gamma"));
                }
            }
            let euclid = b.covering_metric() == Some(Metric::Euclidean) || b.fractal_metric() == Some(Metric::Euclidean);
            if euclid && model.lipschitz().is_none() {
                return Err(at("Euclidean form needs a Lipschitz loss (set loss.input_radius)"));
            }
        }
        Ok(())
    }
}

/// Set `key` (dotted path) of a JSON document to `raw`, parsed as JSON when
/// possible and as a string otherwise.
pub fn apply_override(doc: &mut Value, key: &str, raw: &str) -> Result<()> {
    let root = key.split('.').next().unwrap_or_default();
    if !CONFIG_KEYS.iter().any(|(k, ..)| k.split(['.', '[']).next() == Some(root)) {
        return Err(Error::Config(format!("unknown config key {key:?}")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        let slot = match cur {
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| Error::Config(format!("{key}: {part:?} is not an array index")))?;
                items
                    .get_mut(idx)
                    .ok_or_else(|| Error::Config(format!("{key}: index {idx} out of range")))?
            }
            Value::Object(map) => map.entry(part.to_string()).or_insert(Value::Null),
            other => {
                if other.is_null() {
                    *other = Value::Object(Default::default());
                    other.as_object_mut().unwrap().entry(part.to_string()).or_insert(Value::Null)
                } else {
                    return Err(Error::Config(format!("{key}: cannot descend into a scalar")));
                }
            }
        };
        if last {
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    Ok(())
}

/// Read a config file and apply `key=value` overrides.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut doc: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{} is not valid JSON: {e}", path.display())))?;
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
        apply_override(&mut doc, k.trim(), v.trim())?;
    }
    let cfg: ExperimentConfig = serde_json::from_value(doc).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// A validated config with its population and loss model built.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub population: DataDistribution<f64>,
    pub model: LossModel<f64>,
    pub digest: String,
}

/// Stream of the master seed used to materialize parametric populations.
const POPULATION_STREAM: u64 = u64::MAX;

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let population = if config.distribution.is_finite_support() {
            config.distribution.clone()
        } else {
            config.distribution.materialize(
                config.population_atoms.unwrap_or(DEFAULT_POPULATION_ATOMS),
                derive_seed(config.master_seed, POPULATION_STREAM),
            )?
        };
        Ok(Self {
            model: config.loss.build()?,
            digest: config.digest(),
            population,
            config,
        })
    }
}

/// Mean and standard error over the finite entries of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    #[serde(with = "crate::json::real")]
    pub mean: f64,
    #[serde(with = "crate::json::real")]
    pub std_error: f64,
}

impl Estimate {
    pub fn of(values: &[f64]) -> Self {
        let v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
        let (mean, std_error) = crate::scalar::mean_and_se(&v);
        Self { mean, std_error }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub dataset_seed: u64,
    pub config_digest: String,
    /// Sup-gap of each replicate; NaN for diverged replicates.
    #[serde(with = "crate::json::real_vec")]
    pub replicate_gaps: Vec<f64>,
    #[serde(with = "crate::json::real_vec")]
    pub replicate_abs_gaps: Vec<f64>,
    pub diverged: usize,
    pub flagged: bool,
    pub gap: Estimate,
    pub abs_gap: Estimate,
    pub rademacher: Option<Estimate>,
    pub kl_sgld: Estimate,
    pub kl_brownian: Option<Estimate>,
    /// Mean of `-log Z_T`, absent for noiseless runs.
    pub neg_log_z: Option<Estimate>,
    /// Largest step size of the schedule.
    #[serde(with = "crate::json::real")]
    pub max_step: f64,
    pub curve: Option<CoveringCurve<f64>>,
    pub dimension: Option<DimensionFit<f64>>,
    pub reports: Vec<BoundReport<f64>>,
    #[serde(with = "crate::json::real")]
    pub wall_time_secs: f64,
}

impl TrialRecord {
    /// Quantity a report is compared against: the sup-gap for upper bounds,
    /// the sup absolute gap for lower bounds.
    pub fn empirical_for(&self, report: &BoundReport<f64>) -> f64 {
        match report.side {
            Side::Upper => self.gap.mean,
            Side::Lower => self.abs_gap.mean,
        }
    }

    /// Equality ignoring wall time.
    pub fn same_outcome(&self, other: &Self) -> bool {
        let mut a = self.clone();
        a.wall_time_secs = other.wall_time_secs;
        // NaN entries defeat PartialEq; compare serialized forms instead
        serde_json::to_string(&a).ok() == serde_json::to_string(other).ok()
    }
}

struct Replicate {
    gap: f64,
    abs_gap: f64,
    kl_sgld: f64,
    kl_brownian: Option<f64>,
    neg_log_z: Option<f64>,
    rad: Option<f64>,
    covers: Vec<Option<usize>>,
    curve: Option<(CoveringCurve<f64>, DimensionFit<f64>)>,
}

fn set_of<'a>(exp: &Experiment, traj: &'a Trajectory<f64>) -> &'a [Vec<f64>] {
    match exp.config.pipeline {
        Pipeline::Sgld => traj.iterates(),
        Pipeline::Cld => traj.weights(),
    }
}

fn simulate(exp: &Experiment, data: &Dataset<f64>, seed: u64) -> Result<Trajectory<f64>> {
    let sc = exp.config.dynamics.sgld_config(data.dimension(), seed);
    match exp.config.pipeline {
        Pipeline::Sgld => run_sgld(&sc, &exp.model, data),
        Pipeline::Cld => run_cld_euler(&sc, &exp.model, data),
    }
}

/// Regenerates the trajectory of one replicate of one trial.
pub fn trajectory(exp: &Experiment, trial: usize, replicate: usize) -> Result<Trajectory<f64>> {
    let trial_seed = derive_seed(exp.config.master_seed, trial as u64);
    let data = sample_dataset(&exp.population, exp.config.n, derive_seed(trial_seed, 0))?;
    simulate(exp, &data, derive_seed(trial_seed, 1 + replicate as u64))
}

fn run_replicate(exp: &Experiment, data: &Dataset<f64>, seed: u64, first: bool) -> Result<Option<Replicate>> {
    let cfg = &exp.config;
    let traj = match simulate(exp, data, seed) {
        Ok(t) => t,
        Err(Error::Divergence { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let set = set_of(exp, &traj);
    let gaps = gen_gap_sup(&exp.model, data, &exp.population, set)?;
    let want_matrix = cfg.sign_draws > 0
        || cfg.bounds.iter().any(|b| b.covering_metric() == Some(Metric::DataDependent))
        || (first && cfg.fractal.as_ref().is_some_and(|f| f.metric == Metric::DataDependent));
    let lm = if want_matrix {
        Some(LossMatrix::from_model(&exp.model, data, set)?)
    } else {
        None
    };
    let rad = match (&lm, cfg.sign_draws) {
        (Some(lm), d) if d > 0 => Some(rademacher_mc(lm, d, derive_seed(seed, 1))?.mean),
        _ => None,
    };
    let dd: Option<DistanceMatrix<f64>> = lm.as_ref().map(pseudometric_matrix);
    let geometry = |m: Metric| match m {
        Metric::Euclidean => Geometry::Points(set),
        Metric::DataDependent => Geometry::Matrix(dd.as_ref().expect("matrix built above")),
    };
    let mut orders: BTreeMap<bool, FarthestPointOrder<f64>> = BTreeMap::new();
    let mut covers = Vec::with_capacity(cfg.bounds.len());
    for b in &cfg.bounds {
        covers.push(match b.covering_metric() {
            Some(m) => {
                let order = match orders.entry(m == Metric::Euclidean) {
                    Entry::Occupied(e) => e.into_mut(),
                    Entry::Vacant(v) => v.insert(FarthestPointOrder::compute(&geometry(m))?),
                };
                Some(order.cover_size(b.delta.unwrap_or(0.0)))
            }
            None => None,
        });
    }
    let curve = match (&cfg.fractal, first) {
        (Some(f), true) => {
            let c = covering_curve(&geometry(f.metric), &f.scales.scales())?;
            let fit = fit_box_dimension(&c, f.window.map(|[a, b]| a..b))?;
            Some((c, fit))
        }
        _ => None,
    };
    Ok(Some(Replicate {
        gap: gaps.sup_gap,
        abs_gap: gaps.sup_abs_gap,
        kl_sgld: kl_sgld(&traj),
        kl_brownian: if traj.is_full_batch() {
            Some(kl_brownian_prior(&traj)?)
        } else {
            None
        },
        neg_log_z: if traj.is_noiseless() {
            None
        } else {
            Some(-log_radon_nikodym_sgld(&traj)?)
        },
        rad,
        covers,
        curve,
    }))
}

fn assemble(
    exp: &Experiment,
    b: &BoundSelection,
    rad: f64,
    kl: f64,
    kl_sgld: f64,
    cover: usize,
    dim: Option<f64>,
) -> Result<BoundReport<f64>> {
    let cfg = &exp.config;
    let bound = exp.model.bound();
    let n = cfg.n;
    let c = b.constant.unwrap_or(DEFAULT_RESIDUAL_CONSTANT);
    let l = exp.model.lipschitz();
    match b.formula {
        FormulaId::SgldUpper => sgld_upper(kl_sgld, cfg.dynamics.iterations, bound, n, b.zeta, b.lambda),
        FormulaId::CldBrownianUpper => cld_upper_brownian(rad, kl, bound, n, b.zeta, b.lambda),
        FormulaId::RademacherUpper => pacbayes_rademacher_upper(rad, kl, bound, n, b.zeta, b.lambda),
        FormulaId::RademacherUpperClosed => pacbayes_rademacher_upper_closed(rad, kl, bound, n, b.zeta),
        FormulaId::RademacherLower => lower_bound(rad, bound, n, kl, b.zeta, b.lambda, c),
        FormulaId::CoveringDataDependent | FormulaId::CoveringEuclidean => covering_upper(
            b.delta.unwrap_or(0.0),
            cover,
            bound,
            n,
            kl,
            b.zeta,
            b.lambda,
            b.covering_metric().expect("covering formula"),
            l,
            c,
        ),
        FormulaId::FractalDataDependent | FormulaId::FractalEuclidean => fractal_upper(
            dim.ok_or_else(|| Error::Config("fractal bound without a dimension fit".into()))?,
            b.eps.unwrap_or(0.0),
            n,
            bound,
            kl,
            b.zeta,
            b.gamma.unwrap_or(0.0),
            b.lambda,
            b.fractal_metric().expect("fractal formula"),
            l,
            c,
        ),
        FormulaId::BaselineRademacher => baseline_rademacher(rad, bound, n, b.zeta),
        FormulaId::BaselinePacBayes => baseline_pac_bayes(kl, bound, n, b.zeta),
        FormulaId::GenericSubgaussian | FormulaId::MgfFiniteUpper => {
            Err(Error::Config(format!("{:?} has no experiment pipeline", b.formula)))
        }
    }
}

fn opt_estimate(values: &[Option<f64>]) -> Option<Estimate> {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    if v.is_empty() {
        None
    } else {
        Some(Estimate::of(&v))
    }
}

/// One trial. Replicates run sequentially; parallelism is across trials.
pub fn run_trial(exp: &Experiment, trial: usize) -> Result<TrialRecord> {
    let start = Instant::now();
    let cfg = &exp.config;
    let trial_seed = derive_seed(cfg.master_seed, trial as u64);
    let dataset_seed = derive_seed(trial_seed, 0);
    let data = sample_dataset(&exp.population, cfg.n, dataset_seed)?;
    let mut reps = Vec::with_capacity(cfg.replicates);
    for r in 0..cfg.replicates {
        reps.push(run_replicate(exp, &data, derive_seed(trial_seed, 1 + r as u64), r == 0)?);
    }
    let ok: Vec<&Replicate> = reps.iter().flatten().collect();
    let diverged = reps.len() - ok.len();
    let flagged = 2 * diverged > cfg.replicates;
    let replicate_gaps: Vec<f64> = reps.iter().map(|r| r.as_ref().map_or(f64::NAN, |r| r.gap)).collect();
    let replicate_abs_gaps: Vec<f64> = reps.iter().map(|r| r.as_ref().map_or(f64::NAN, |r| r.abs_gap)).collect();
    let kl_s: Vec<f64> = ok.iter().map(|r| r.kl_sgld).collect();
    let kl_sgld = Estimate::of(&kl_s);
    let kl_brownian = opt_estimate(&ok.iter().map(|r| r.kl_brownian).collect::<Vec<_>>());
    let rademacher = opt_estimate(&ok.iter().map(|r| r.rad).collect::<Vec<_>>());
    let neg_log_z = opt_estimate(&ok.iter().map(|r| r.neg_log_z).collect::<Vec<_>>());
    let (curve, dimension) = match ok.first().and_then(|r| r.curve.clone()) {
        Some((c, f)) => (Some(c), Some(f)),
        None => (None, None),
    };
    let mut reports = Vec::new();
    if !flagged {
        let kl = match cfg.pipeline {
            Pipeline::Cld => kl_brownian.map_or(kl_sgld.mean, |e| e.mean),
            Pipeline::Sgld => kl_sgld.mean,
        };
        let rad = rademacher.map_or(0.0, |e| e.mean);
        for (i, b) in cfg.bounds.iter().enumerate() {
            // covering sizes enter through the largest replicate value
            let cover = ok.iter().filter_map(|r| r.covers[i]).max().unwrap_or(1);
            reports.push(assemble(
                exp,
                b,
                rad,
                kl,
                kl_sgld.mean,
                cover,
                dimension.as_ref().map(|d| d.dimension),
            )?);
        }
    }
    let sc = cfg.dynamics.sgld_config(data.dimension(), 0);
    Ok(TrialRecord {
        trial,
        dataset_seed,
        config_digest: exp.digest.clone(),
        gap: Estimate::of(&replicate_gaps),
        abs_gap: Estimate::of(&replicate_abs_gaps),
        replicate_gaps,
        replicate_abs_gaps,
        diverged,
        flagged,
        rademacher,
        kl_sgld,
        kl_brownian,
        neg_log_z,
        max_step: sc.eta.iter().copied().fold(0.0, f64::max),
        curve,
        dimension,
        reports,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Worker count: `RANDSET_THREADS`, then `config.threads`, then rayon's
/// default (0).
pub fn worker_count(config: &ExperimentConfig) -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV}={v:?} is not a thread count"))),
        Err(_) => Ok(config.threads.unwrap_or(0)),
    }
}

pub fn run_trials(config: &ExperimentConfig) -> Result<Vec<TrialRecord>> {
    run_trials_with_threads(config, worker_count(config)?)
}

/// Records in trial order, computed on a pool of `threads` workers (0 means
/// rayon's default).
pub fn run_trials_with_threads(config: &ExperimentConfig, threads: usize) -> Result<Vec<TrialRecord>> {
    let exp = Experiment::new(config.clone())?;
    if config.trials == 0 {
        return Ok(Vec::new());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let records: Vec<TrialRecord> =
        pool.install(|| (0..config.trials).into_par_iter().map(|t| run_trial(&exp, t)).collect::<Result<_>>())?;
    let flagged = records.iter().filter(|r| r.flagged).count();
    if flagged > 0 {
        log::warn!("{flagged} of {} trials flagged for divergence", records.len());
    }
    Ok(records)
}

/// Location and spread of a sample of trial-level values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub count: usize,
    #[serde(with = "crate::json::real")]
    pub mean: f64,
    #[serde(with = "crate::json::real")]
    pub median: f64,
    #[serde(with = "crate::json::real")]
    pub std_error: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Self {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
        let (mean, std_error) = crate::scalar::mean_and_se(&v);
        v.sort_by(f64::total_cmp);
        let median = match v.len() {
            0 => f64::NAN,
            l if l % 2 == 1 => v[l / 2],
            l => 0.5 * (v[l / 2 - 1] + v[l / 2]),
        };
        Self {
            count: v.len(),
            mean,
            median,
            std_error,
        }
    }
}

/// Binomial tolerance floor `(1 - zeta) - 3 sqrt(zeta (1 - zeta) / m)`.
pub fn binomial_floor(zeta: f64, m: usize) -> f64 {
    (1.0 - zeta) - 3.0 * (zeta * (1.0 - zeta) / m as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub index: usize,
    pub formula: FormulaId,
    pub side: Side,
    #[serde(with = "crate::json::real")]
    pub zeta: f64,
    #[serde(with = "crate::json::real")]
    pub confidence_level: f64,
    pub covered: usize,
    pub uncovered: usize,
    #[serde(with = "crate::json::real")]
    pub coverage: f64,
    /// Binomial floor at the report's own confidence level.
    #[serde(with = "crate::json::real")]
    pub binomial_floor: f64,
    pub meets_floor: bool,
    pub value: Stats,
    pub terms: BTreeMap<Term, Stats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub schema: String,
    pub config_digest: String,
    pub records_total: usize,
    pub flagged: usize,
    pub gap: Stats,
    pub abs_gap: Stats,
    pub kl_sgld: Stats,
    pub rademacher: Option<Stats>,
    pub dimension: Option<Stats>,
    pub bounds: Vec<BoundSummary>,
    /// Fraction of trials with max lower <= abs gap <= min upper, when both
    /// sides are present.
    pub sandwich: Option<f64>,
    /// Binomial floor at the nominal `zeta` given to [`summarize`].
    #[serde(with = "crate::json::real")]
    pub nominal_floor: f64,
}

pub fn summarize(records: &[TrialRecord], zeta: f64) -> Result<SummaryReport> {
    let live: Vec<&TrialRecord> = records.iter().filter(|r| !r.flagged).collect();
    if live.is_empty() {
        return Err(Error::EmptyInput("no unflagged records".into()));
    }
    let m = live.len();
    let nb = live[0].reports.len();
    if live.iter().any(|r| r.reports.len() != nb) {
        return Err(Error::Config("records carry different bound selections".into()));
    }
    let mut bounds = Vec::with_capacity(nb);
    for i in 0..nb {
        let first = &live[0].reports[i];
        let covered = live.iter().filter(|r| r.reports[i].covers(r.empirical_for(&r.reports[i]))).count();
        let values: Vec<f64> = live.iter().map(|r| r.reports[i].value).collect();
        let mut terms = BTreeMap::new();
        for t in Term::ALL {
            if live.iter().any(|r| r.reports[i].terms.iter().any(|x| x.0 == t)) {
                let v: Vec<f64> = live.iter().map(|r| r.reports[i].term(t)).collect();
                terms.insert(t, Stats::of(&v));
            }
        }
        let floor = binomial_floor(1.0 - first.confidence_level, m);
        let coverage = covered as f64 / m as f64;
        bounds.push(BoundSummary {
            index: i,
            formula: first.formula,
            side: first.side,
            zeta: first.zeta,
            confidence_level: first.confidence_level,
            covered,
            uncovered: m - covered,
            coverage,
            binomial_floor: floor,
            meets_floor: coverage >= floor,
            value: Stats::of(&values),
            terms,
        });
    }
    let both = live
        .iter()
        .filter_map(|r| {
            let lo = r.reports.iter().filter(|x| x.side == Side::Lower).map(|x| x.value);
            let hi = r.reports.iter().filter(|x| x.side == Side::Upper).map(|x| x.value);
            let lo = lo.fold(None, |a: Option<f64>, v| Some(a.map_or(v, |a| a.max(v))))?;
            let hi = hi.fold(None, |a: Option<f64>, v| Some(a.map_or(v, |a| a.min(v))))?;
            Some(lo <= r.abs_gap.mean && r.abs_gap.mean <= hi)
        })
        .collect::<Vec<bool>>();
    let sandwich = (!both.is_empty()).then(|| both.iter().filter(|&&b| b).count() as f64 / both.len() as f64);
    let col = |f: &dyn Fn(&TrialRecord) -> Option<f64>| -> Option<Stats> {
        let v: Vec<f64> = live.iter().filter_map(|r| f(r)).collect();
        (!v.is_empty()).then(|| Stats::of(&v))
    };
    Ok(SummaryReport {
        schema: CONFIG_SCHEMA.into(),
        config_digest: live[0].config_digest.clone(),
        records_total: records.len(),
        flagged: records.len() - m,
        gap: Stats::of(&live.iter().map(|r| r.gap.mean).collect::<Vec<_>>()),
        abs_gap: Stats::of(&live.iter().map(|r| r.abs_gap.mean).collect::<Vec<_>>()),
        kl_sgld: Stats::of(&live.iter().map(|r| r.kl_sgld.mean).collect::<Vec<_>>()),
        rademacher: col(&|r| r.rademacher.map(|e| e.mean)),
        dimension: col(&|r| r.dimension.as_ref().map(|d| d.dimension)),
        bounds,
        sandwich,
        nominal_floor: binomial_floor(zeta, m),
    })
}

pub fn write_records_to<W: Write>(records: &[TrialRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records_from<R: BufRead>(input: R) -> Result<Vec<TrialRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// JSON-lines, one record per line.
pub fn write_records(records: &[TrialRecord], path: &Path) -> Result<()> {
    write_records_to(records, BufWriter::new(File::create(path)?))
}

pub fn read_records(path: &Path) -> Result<Vec<TrialRecord>> {
    read_records_from(BufReader::new(File::open(path)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlotKind {
    /// `trial,bound,formula,side,value,empirical`
    BoundVsGap,
    /// `trial,log_inv_scale,log_cover`
    DimFit,
    /// `trial,bound,formula,<term columns>,value`
    TermBreakdown,
}

impl PlotKind {
    pub const ALL: [PlotKind; 3] = [PlotKind::BoundVsGap, PlotKind::DimFit, PlotKind::TermBreakdown];

    pub fn name(self) -> &'static str {
        match self {
            PlotKind::BoundVsGap => "bound-vs-gap",
            PlotKind::DimFit => "dim-fit",
            PlotKind::TermBreakdown => "term-breakdown",
        }
    }
}

impl FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PlotKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown plot kind {s:?} (bound-vs-gap, dim-fit, term-breakdown)")))
    }
}

fn name_of<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(Value::String(s)) => s,
        _ => String::new(),
    }
}

pub fn emit_plot_data_to<W: Write>(records: &[TrialRecord], kind: PlotKind, out: W) -> Result<()> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no records".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    match kind {
        PlotKind::BoundVsGap => {
            w.write_record(["trial", "bound", "formula", "side", "value", "empirical"]).map_err(csv_err)?;
            for r in records {
                for (i, rep) in r.reports.iter().enumerate() {
                    w.write_record([
                        r.trial.to_string(),
                        i.to_string(),
                        name_of(&rep.formula),
                        name_of(&rep.side),
                        rep.value.to_string(),
                        r.empirical_for(rep).to_string(),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
        PlotKind::DimFit => {
            w.write_record(["trial", "log_inv_scale", "log_cover"]).map_err(csv_err)?;
            for r in records {
                if let Some(c) = &r.curve {
                    for (x, y) in c.log_points() {
                        w.write_record([r.trial.to_string(), x.to_string(), y.to_string()]).map_err(csv_err)?;
                    }
                }
            }
        }
        PlotKind::TermBreakdown => {
            let mut header = vec!["trial".to_string(), "bound".into(), "formula".into()];
            header.extend(Term::ALL.iter().map(|t| t.name().to_string()));
            header.push("value".into());
            w.write_record(&header).map_err(csv_err)?;
            for r in records {
                for (i, rep) in r.reports.iter().enumerate() {
                    let mut row = vec![r.trial.to_string(), i.to_string(), name_of(&rep.formula)];
                    row.extend(Term::ALL.iter().map(|&t| rep.term(t).to_string()));
                    row.push(rep.value.to_string());
                    w.write_record(&row).map_err(csv_err)?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn emit_plot_data(records: &[TrialRecord], kind: PlotKind, path: &Path) -> Result<()> {
    emit_plot_data_to(records, kind, BufWriter::new(File::create(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{
                "master_seed": 11,
                "distribution": {"kind": "gaussian_mixture", "means": [[-1.0, 0.0], [1.0, 0.0]],
                                 "scale": 1.0, "class_priors": [0.5, 0.5]},
                "population_atoms": 256,
                "loss": {"kind": "clipped_logistic", "bound": 1.0, "margin": 0.5, "input_radius": 3.0},
                "n": 20,
                "dynamics": {"iterations": 10, "eta": 0.05, "beta": 10.0},
                "bounds": [{"formula": "sgld_upper", "zeta": 0.05},
                           {"formula": "rademacher_lower", "zeta": 0.05, "lambda": 5.0}],
                "trials": 6,
                "replicates": 4,
                "sign_draws": 50
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn override_sets_nested_key() {
        let mut doc = serde_json::to_value(small_config()).unwrap();
        apply_override(&mut doc, "dynamics.beta", "3.5").unwrap();
        apply_override(&mut doc, "bounds.0.zeta", "0.1").unwrap();
        let cfg: ExperimentConfig = serde_json::from_value(doc).unwrap();
        assert_eq!(cfg.dynamics.beta, 3.5);
        assert_eq!(cfg.bounds[0].zeta, 0.1);
        let mut doc = serde_json::to_value(small_config()).unwrap();
        assert!(matches!(apply_override(&mut doc, "nonsense", "1"), Err(Error::Config(_))));
    }

    #[test]
    fn thread_count_does_not_change_records() {
        let cfg = small_config();
        let a = run_trials_with_threads(&cfg, 1).unwrap();
        let b = run_trials_with_threads(&cfg, 3).unwrap();
        assert_eq!(a.len(), 6);
        assert!(a.iter().zip(&b).all(|(x, y)| x.same_outcome(y)));
    }

    #[test]
    fn plot_kind_names() {
        assert_eq!("dim-fit".parse::<PlotKind>().unwrap(), PlotKind::DimFit);
        assert!(matches!("pie".parse::<PlotKind>(), Err(Error::Usage(_))));
    }
}
