//! Exact enumeration on tiny finite worlds.
//!
//! A [`FiniteInstance`] has a finite data space, a loss table over a finite
//! pool of hypotheses, a menu of hypothesis sets and a posterior kernel
//! indexed by datasets. Datasets of size `n` are enumerated in
//! lexicographic order of atom indices, first coordinate most significant.
//! Everything here is `f64`.

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::bounds::{gibbs_objective, gibbs_rademacher_posterior, kl_discrete, DEFAULT_RESIDUAL_CONSTANT};
use crate::complexity::{massart_bound, rademacher_mc, LossMatrix};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, SimRng};

pub const MAX_N: usize = 8;
pub const MAX_ATOMS: usize = 4;
pub const MAX_MENU: usize = 8;
/// Largest `n` accepted by the matrix enumerators.
pub const MAX_SIGN_BITS: usize = 20;
/// Accepted floating-point slack on exact inequalities.
pub const SLACK: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorSpec {
    /// The dataset-marginal of the kernel, `sum_S P(S) rho_S`.
    Optimized,
    Weights(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiniteInstance {
    /// Data values (labels only; losses are indexed by atom position).
    pub z_atoms: Vec<f64>,
    pub z_probs: Vec<f64>,
    pub n: usize,
    pub bound: f64,
    /// `loss_table[w][z]` for every hypothesis `w` of the pool.
    pub loss_table: Vec<Vec<f64>>,
    /// Hypothesis sets as index lists into the pool.
    pub menu: Vec<Vec<usize>>,
    /// One distribution over the menu per dataset.
    pub kernel: Vec<Vec<f64>>,
    pub prior: PriorSpec,
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() || p.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(Error::Config(format!("{what}: weights must be finite and >= 0")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-12 {
        return Err(Error::Config(format!("{what}: weights sum to {s}, not 1")));
    }
    Ok(())
}

/// Exact tables derived from an instance.
#[derive(Clone, Debug)]
pub struct Enumeration {
    /// Atom indices of each dataset.
    pub datasets: Vec<Vec<usize>>,
    pub dataset_probs: Vec<f64>,
    /// `empirical[s][w]`.
    pub empirical: Vec<Vec<f64>>,
    /// `population[w]`.
    pub population: Vec<f64>,
}

impl FiniteInstance {
    pub fn num_datasets(&self) -> usize {
        self.z_atoms.len().pow(self.n as u32)
    }

    pub fn check_capacity(&self) -> Result<()> {
        if self.n == 0 || self.n > MAX_N {
            return Err(Error::Capacity(format!("n must lie in 1..={MAX_N}, got {}", self.n)));
        }
        if self.z_atoms.is_empty() || self.z_atoms.len() > MAX_ATOMS {
            return Err(Error::Capacity(format!(
                "at most {MAX_ATOMS} atoms are supported, got {}",
                self.z_atoms.len()
            )));
        }
        if self.menu.is_empty() || self.menu.len() > MAX_MENU {
            return Err(Error::Capacity(format!(
                "menu size must lie in 1..={MAX_MENU}, got {}",
                self.menu.len()
            )));
        }
        Ok(())
    }

    /// Shape, probability and absolute-continuity checks.
    pub fn validate(&self) -> Result<()> {
        self.check_capacity()?;
        if self.z_probs.len() != self.z_atoms.len() {
            return Err(Error::Config("z_atoms and z_probs differ in length".into()));
        }
        check_distribution(&self.z_probs, "z_probs")?;
        if !(self.bound > 0.0) {
            return Err(Error::Config("loss bound must be > 0".into()));
        }
        let m = self.z_atoms.len();
        if self.loss_table.is_empty() || self.loss_table.iter().any(|r| r.len() != m) {
            return Err(Error::Config("loss table must have one column per atom".into()));
        }
        if self.loss_table.iter().flatten().any(|&v| !(v >= 0.0 && v <= self.bound)) {
            return Err(Error::Config("loss table entries must lie in [0, B]".into()));
        }
        let pool = self.loss_table.len();
        for (j, set) in self.menu.iter().enumerate() {
            if set.is_empty() || set.iter().any(|&w| w >= pool) {
                return Err(Error::Config(format!("menu set {j} is empty or refers outside the pool")));
            }
        }
        if self.kernel.len() != self.num_datasets() {
            return Err(Error::Config(format!(
                "kernel needs {} rows (one per dataset), got {}",
                self.num_datasets(),
                self.kernel.len()
            )));
        }
        for (s, row) in self.kernel.iter().enumerate() {
            if row.len() != self.menu.len() {
                return Err(Error::Config(format!("kernel row {s} has the wrong length")));
            }
            check_distribution(row, &format!("kernel row {s}"))?;
        }
        if let PriorSpec::Weights(w) = &self.prior {
            if w.len() != self.menu.len() {
                return Err(Error::Config("prior length differs from menu size".into()));
            }
            check_distribution(w, "prior")?;
            let probs = self.dataset_probs();
            for (s, row) in self.kernel.iter().enumerate() {
                if probs[s] <= 0.0 {
                    continue;
                }
                for (j, &r) in row.iter().enumerate() {
                    if r > 0.0 && w[j] <= 0.0 {
                        return Err(Error::AbsoluteContinuity { dataset: s, set: j });
                    }
                }
            }
        }
        Ok(())
    }

    /// Atom indices of dataset `index`.
    pub fn dataset(&self, mut index: usize) -> Vec<usize> {
        let m = self.z_atoms.len();
        let mut out = vec![0; self.n];
        for slot in out.iter_mut().rev() {
            *slot = index % m;
            index /= m;
        }
        out
    }

    pub fn dataset_probs(&self) -> Vec<f64> {
        (0..self.num_datasets())
            .map(|s| self.dataset(s).iter().map(|&z| self.z_probs[z]).product())
            .collect()
    }

    pub fn enumerate(&self) -> Result<Enumeration> {
        self.validate()?;
        let datasets: Vec<Vec<usize>> = (0..self.num_datasets()).map(|s| self.dataset(s)).collect();
        let nf = self.n as f64;
        let empirical = datasets
            .iter()
            .map(|d| {
                self.loss_table
                    .iter()
                    .map(|row| d.iter().map(|&z| row[z]).sum::<f64>() / nf)
                    .collect()
            })
            .collect();
        let population = self
            .loss_table
            .iter()
            .map(|row| row.iter().zip(&self.z_probs).map(|(l, p)| l * p).sum())
            .collect();
        Ok(Enumeration {
            dataset_probs: self.dataset_probs(),
            datasets,
            empirical,
            population,
        })
    }

    /// Prior weights, resolving `Optimized` to the kernel marginal.
    pub fn prior_weights(&self) -> Vec<f64> {
        match &self.prior {
            PriorSpec::Weights(w) => w.clone(),
            PriorSpec::Optimized => optimized_prior(&self.dataset_probs(), &self.kernel),
        }
    }

    fn set_matrix(&self, dataset: &[usize], set: usize) -> LossMatrix<f64> {
        let cols = &self.menu[set];
        let values = dataset
            .iter()
            .flat_map(|&z| cols.iter().map(move |&w| self.loss_table[w][z]))
            .collect();
        LossMatrix::from_row_major(dataset.len(), cols.len(), values, self.bound).expect("validated instance")
    }
}

/// `sum_S P(S) rho_S`.
pub fn optimized_prior(dataset_probs: &[f64], kernel: &[Vec<f64>]) -> Vec<f64> {
    let k = kernel.first().map_or(0, Vec::len);
    let mut out = vec![0.0; k];
    for (p, row) in dataset_probs.iter().zip(kernel) {
        for (o, r) in out.iter_mut().zip(row) {
            *o += p * r;
        }
    }
    out
}

fn sign_enum_sup(lm: &LossMatrix<f64>, mut f: impl FnMut(f64)) -> Result<()> {
    let n = lm.n();
    if n == 0 || lm.k() == 0 {
        return Err(Error::Domain("loss matrix is empty".into()));
    }
    if n > MAX_SIGN_BITS {
        return Err(Error::Capacity(format!("exact enumeration supports n <= {MAX_SIGN_BITS}")));
    }
    let mut acc = vec![0.0; lm.k()];
    for mask in 0u32..(1u32 << n) {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for i in 0..n {
            let row = lm.row(i);
            if mask >> i & 1 == 1 {
                acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            } else {
                acc.iter_mut().zip(row).for_each(|(a, v)| *a -= v);
            }
        }
        f(acc.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
    Ok(())
}

/// Exact empirical Rademacher complexity over all `2^n` sign vectors.
pub fn exact_rademacher_matrix(lm: &LossMatrix<f64>) -> Result<f64> {
    let mut s = 0.0;
    sign_enum_sup(lm, |v| s += v)?;
    Ok(s / (lm.n() as f64) / (1u64 << lm.n()) as f64)
}

/// Exact MGF `E_eps exp((lambda/n) max_j sum_i eps_i l_ij)`.
pub fn exact_rademacher_mgf_matrix(lm: &LossMatrix<f64>, lambda: f64) -> Result<f64> {
    let mut s = 0.0;
    let c = lambda / lm.n() as f64;
    sign_enum_sup(lm, |v| s += (c * v).exp())?;
    Ok(s / (1u64 << lm.n()) as f64)
}

pub fn exact_rademacher(inst: &FiniteInstance, dataset_index: usize, set_index: usize) -> Result<f64> {
    inst.validate()?;
    if dataset_index >= inst.num_datasets() || set_index >= inst.menu.len() {
        return Err(Error::Domain("dataset or set index out of range".into()));
    }
    exact_rademacher_matrix(&inst.set_matrix(&inst.dataset(dataset_index), set_index))
}

/// Both sides of an exact inequality check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

impl LemmaCheck {
    fn le(lhs: f64, rhs: f64, tol: f64) -> Self {
        Self {
            lhs,
            rhs,
            holds: lhs <= rhs + tol,
        }
    }

    fn ge(lhs: f64, rhs: f64, tol: f64) -> Self {
        Self {
            lhs,
            rhs,
            holds: lhs >= rhs - tol,
        }
    }
}

fn sup_gap(e: &Enumeration, s: usize, set: &[usize]) -> f64 {
    set.iter()
        .map(|&w| e.population[w] - e.empirical[s][w])
        .fold(f64::NEG_INFINITY, f64::max)
}

fn sup_abs_gap(e: &Enumeration, s: usize, set: &[usize]) -> f64 {
    set.iter()
        .map(|&w| (e.population[w] - e.empirical[s][w]).abs())
        .fold(f64::NEG_INFINITY, f64::max)
}

fn check_set(inst: &FiniteInstance, set: usize) -> Result<()> {
    if set >= inst.menu.len() {
        Err(Error::Domain(format!("set index {set} out of range")))
    } else {
        Ok(())
    }
}

/// `E_S sup_W (R - R_S) <= 2 E_S Rad_S(W)` for a fixed set.
pub fn check_symmetrization(inst: &FiniteInstance, set_index: usize) -> Result<LemmaCheck> {
    let e = inst.enumerate()?;
    check_set(inst, set_index)?;
    let set = &inst.menu[set_index];
    let (mut lhs, mut rad) = (0.0, 0.0);
    for (s, d) in e.datasets.iter().enumerate() {
        let p = e.dataset_probs[s];
        lhs += p * sup_gap(&e, s, set);
        rad += p * exact_rademacher_matrix(&inst.set_matrix(d, set_index))?;
    }
    Ok(LemmaCheck::le(lhs, 2.0 * rad, SLACK))
}

/// `E_S exp(lambda sup gap) <= E_S E_eps exp((2 lambda / n) sup sum eps l)`.
pub fn check_exp_symmetrization(inst: &FiniteInstance, set_index: usize, lambda: f64) -> Result<LemmaCheck> {
    let e = inst.enumerate()?;
    check_set(inst, set_index)?;
    let set = &inst.menu[set_index];
    let (mut lhs, mut rhs) = (0.0, 0.0);
    for (s, d) in e.datasets.iter().enumerate() {
        let p = e.dataset_probs[s];
        lhs += p * (lambda * sup_gap(&e, s, set)).exp();
        rhs += p * exact_rademacher_mgf_matrix(&inst.set_matrix(d, set_index), 2.0 * lambda)?;
    }
    Ok(LemmaCheck::le(lhs, rhs, SLACK * rhs.max(1.0)))
}

/// `E_S sup |R_S - R| >= Rad/2 - B/(2 sqrt n)` with `Rad = E_S Rad_S(W)`.
pub fn check_desymmetrization(inst: &FiniteInstance, set_index: usize) -> Result<LemmaCheck> {
    let e = inst.enumerate()?;
    check_set(inst, set_index)?;
    let set = &inst.menu[set_index];
    let (mut lhs, mut rad) = (0.0, 0.0);
    for (s, d) in e.datasets.iter().enumerate() {
        let p = e.dataset_probs[s];
        lhs += p * sup_abs_gap(&e, s, set);
        rad += p * exact_rademacher_matrix(&inst.set_matrix(d, set_index))?;
    }
    let rhs = 0.5 * rad - inst.bound / (2.0 * (inst.n as f64).sqrt());
    Ok(LemmaCheck::ge(lhs, rhs, SLACK))
}

/// Exact information-theoretic terms of the kernel against the prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItTerms {
    pub prior: Vec<f64>,
    /// `rho_S(W) / pi(W)`, zero where `rho_S(W) = 0`.
    pub rn_table: Vec<Vec<f64>>,
    pub kl_per_dataset: Vec<f64>,
    /// Mutual information `sum_S P(S) KL(rho_S || pi)`.
    pub i1: f64,
    /// Log of the largest density ratio over supported pairs.
    pub iinf: f64,
    /// Argmax pair `(dataset, set)` of the density ratio.
    pub iinf_at: (usize, usize),
}

pub fn finite_it_terms(inst: &FiniteInstance) -> Result<ItTerms> {
    inst.validate()?;
    let probs = inst.dataset_probs();
    let prior = inst.prior_weights();
    let mut rn_table = Vec::with_capacity(inst.kernel.len());
    let mut kl_per_dataset = Vec::with_capacity(inst.kernel.len());
    let mut best = (f64::NEG_INFINITY, (0, 0));
    for (s, row) in inst.kernel.iter().enumerate() {
        let mut ratios = vec![0.0; row.len()];
        for (j, &r) in row.iter().enumerate() {
            if r > 0.0 {
                if prior[j] <= 0.0 {
                    if probs[s] > 0.0 {
                        return Err(Error::AbsoluteContinuity { dataset: s, set: j });
                    }
                    continue;
                }
                ratios[j] = r / prior[j];
                if probs[s] > 0.0 && ratios[j] > best.0 {
                    best = (ratios[j], (s, j));
                }
            }
        }
        kl_per_dataset.push(kl_discrete(row, &prior));
        rn_table.push(ratios);
    }
    let i1 = probs
        .iter()
        .zip(&kl_per_dataset)
        .filter(|(&p, _)| p > 0.0)
        .map(|(p, k)| p * k)
        .sum();
    Ok(ItTerms {
        prior,
        rn_table,
        kl_per_dataset,
        i1,
        iinf: best.0.ln(),
        iinf_at: best.1,
    })
}

/// Bound events whose probability [`exact_bound_coverage`] computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageFormula {
    /// `E_rho G <= E_rho 2Rad + (KL + log 1/zeta)/lambda + 9 lambda B^2/(8n)`.
    RademacherKl,
    /// `G(W) <= 2Rad(W) + (log drho/dpi (W) + log 1/zeta)/lambda + 9 lambda B^2/(8n)`.
    RademacherDisintegrated,
    /// `E_rho G_abs >= E_rho Rad/2 - B/(2 sqrt n) - (KL + log 1/zeta)/lambda - C B^2 lambda / n`.
    LowerKl,
}

impl CoverageFormula {
    pub const ALL: [CoverageFormula; 3] = [
        CoverageFormula::RademacherKl,
        CoverageFormula::RademacherDisintegrated,
        CoverageFormula::LowerKl,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    /// Probability of the bound event.
    pub probability: f64,
    /// Mass of outcomes whose slack is within `1e-9` of zero.
    pub near_tie_mass: f64,
    /// Mass of `(S, W)` pairs with density ratio exactly 1.
    pub flat_ratio_mass: f64,
}

pub fn exact_bound_coverage(
    inst: &FiniteInstance,
    lambda: f64,
    zeta: f64,
    formula: CoverageFormula,
) -> Result<Coverage> {
    if !(zeta > 0.0 && zeta < 1.0) || !(lambda > 0.0) {
        return Err(Error::Domain("zeta must lie in (0,1) and lambda be > 0".into()));
    }
    let e = inst.enumerate()?;
    let it = finite_it_terms(inst)?;
    let n = inst.n as f64;
    let b2 = inst.bound * inst.bound;
    let conf = (1.0 / zeta).ln();
    let upper_res = lambda * DEFAULT_RESIDUAL_CONSTANT * b2 / n;
    let lower_res = DEFAULT_RESIDUAL_CONSTANT * b2 * lambda / n;
    let mut cov = Coverage {
        probability: 0.0,
        near_tie_mass: 0.0,
        flat_ratio_mass: 0.0,
    };
    let tie = |slack: f64, rhs: f64| slack.abs() <= 1e-9 * rhs.abs().max(1.0);
    for (s, d) in e.datasets.iter().enumerate() {
        let p = e.dataset_probs[s];
        if p <= 0.0 {
            continue;
        }
        let row = &inst.kernel[s];
        let rads: Vec<f64> = (0..inst.menu.len())
            .map(|j| exact_rademacher_matrix(&inst.set_matrix(d, j)))
            .collect::<Result<_>>()?;
        for (j, &r) in row.iter().enumerate() {
            if r > 0.0 && it.rn_table[s][j] == 1.0 {
                cov.flat_ratio_mass += p * r;
            }
        }
        match formula {
            CoverageFormula::RademacherKl | CoverageFormula::LowerKl => {
                let mut eg = 0.0;
                let mut erad = 0.0;
                for (j, &r) in row.iter().enumerate() {
                    if r > 0.0 {
                        let g = if formula == CoverageFormula::LowerKl {
                            sup_abs_gap(&e, s, &inst.menu[j])
                        } else {
                            sup_gap(&e, s, &inst.menu[j])
                        };
                        eg += r * g;
                        erad += r * rads[j];
                    }
                }
                let kl = it.kl_per_dataset[s];
                let (holds, slack, rhs) = if formula == CoverageFormula::RademacherKl {
                    let rhs = 2.0 * erad + (kl + conf) / lambda + upper_res;
                    (eg <= rhs, rhs - eg, rhs)
                } else {
                    let rhs = 0.5 * erad - inst.bound / (2.0 * n.sqrt()) - (kl + conf) / lambda - lower_res;
                    (eg >= rhs, eg - rhs, rhs)
                };
                if holds {
                    cov.probability += p;
                }
                if tie(slack, rhs) {
                    cov.near_tie_mass += p;
                }
            }
            CoverageFormula::RademacherDisintegrated => {
                for (j, &r) in row.iter().enumerate() {
                    if r <= 0.0 {
                        continue;
                    }
                    let g = sup_gap(&e, s, &inst.menu[j]);
                    let rhs = 2.0 * rads[j] + (it.rn_table[s][j].ln() + conf) / lambda + upper_res;
                    if g <= rhs {
                        cov.probability += p * r;
                    }
                    if tie(rhs - g, rhs) {
                        cov.near_tie_mass += p * r;
                    }
                }
            }
        }
    }
    Ok(cov)
}

/// `max_f |E_rho f - E_pi f|` over the rows of `functions`.
pub fn finite_ipm(rho: &[f64], pi: &[f64], functions: &[Vec<f64>]) -> Result<f64> {
    check_distribution(rho, "rho").map_err(|e| Error::Domain(e.to_string()))?;
    check_distribution(pi, "pi").map_err(|e| Error::Domain(e.to_string()))?;
    if rho.len() != pi.len() || functions.iter().any(|f| f.len() != rho.len()) {
        return Err(Error::Domain("function table does not match the menu size".into()));
    }
    Ok(functions
        .iter()
        .map(|f| {
            f.iter()
                .zip(rho.iter().zip(pi))
                .map(|(v, (r, p))| v * (r - p))
                .sum::<f64>()
                .abs()
        })
        .fold(0.0, f64::max))
}

/// Size limits for random instances.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceShape {
    pub max_atoms: usize,
    pub max_n: usize,
    /// Largest hypothesis pool (and hence set) size.
    pub max_pool: usize,
    pub max_menu: usize,
}

impl Default for InstanceShape {
    fn default() -> Self {
        Self {
            max_atoms: 3,
            max_n: 4,
            max_pool: 3,
            max_menu: 4,
        }
    }
}

pub fn dirichlet_uniform(rng: &mut SimRng, k: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    // absorb rounding so the row sums to 1 to within an ulp or two
    let drift = 1.0 - v.iter().sum::<f64>();
    if let Some(m) = v.iter_mut().max_by(|a, b| a.total_cmp(b)) {
        *m += drift;
    }
    v
}

/// Random instance: uniform losses on `[0, 1]`, Dirichlet(1) atom
/// probabilities and kernel rows, random nonempty subsets as menu,
/// optimized prior.
pub fn random_instance(seed: u64, shape: InstanceShape) -> FiniteInstance {
    let mut rng = rng_from_seed(seed);
    let m = rng.random_range(2..=shape.max_atoms.max(2));
    let n = rng.random_range(1..=shape.max_n.max(1));
    let pool = rng.random_range(1..=shape.max_pool.max(1));
    let menu_size = rng.random_range(1..=shape.max_menu.max(1));
    let loss_table = (0..pool)
        .map(|_| (0..m).map(|_| rng.random::<f64>()).collect())
        .collect();
    let z_probs = dirichlet_uniform(&mut rng, m);
    let menu = (0..menu_size)
        .map(|_| {
            let mask = rng.random_range(1..(1u32 << pool));
            (0..pool).filter(|&w| mask >> w & 1 == 1).collect()
        })
        .collect();
    let datasets = m.pow(n as u32);
    let kernel = (0..datasets).map(|_| dirichlet_uniform(&mut rng, menu_size)).collect();
    FiniteInstance {
        z_atoms: (0..m).map(|z| z as f64).collect(),
        z_probs,
        n,
        bound: 1.0,
        loss_table,
        menu,
        kernel,
        prior: PriorSpec::Optimized,
    }
}

/// Outcome of one battery of checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatteryResult {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    /// Smallest observed margin in favour of the checked statement.
    pub worst_margin: f64,
}

impl BatteryResult {
    fn new(name: &str) -> Self {
        Self {
            name: name.into(),
            cases: 0,
            failures: 0,
            worst_margin: f64::INFINITY,
        }
    }

    fn record(&mut self, ok: bool, margin: f64) {
        self.cases += 1;
        if !ok {
            self.failures += 1;
        }
        self.worst_margin = self.worst_margin.min(margin);
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.cases > 0
    }
}

fn battery_seed(master: u64, battery: u64, case: u64) -> u64 {
    derive_seed(derive_seed(master, battery), case)
}

/// Symmetrization, exponential symmetrization (`lambda` in {0.5, 1, 2}) and
/// desymmetrization on `count` random instances, every menu set.
pub fn lemma_batteries(seed: u64, count: usize) -> Result<[BatteryResult; 3]> {
    let mut sym = BatteryResult::new("symmetrization");
    let mut exp = BatteryResult::new("exponential symmetrization");
    let mut desym = BatteryResult::new("desymmetrization");
    for c in 0..count {
        let inst = random_instance(battery_seed(seed, 1, c as u64), InstanceShape::default());
        for j in 0..inst.menu.len() {
            let r = check_symmetrization(&inst, j)?;
            sym.record(r.holds, r.rhs - r.lhs);
            for lambda in [0.5, 1.0, 2.0] {
                let r = check_exp_symmetrization(&inst, j, lambda)?;
                exp.record(r.holds, (r.rhs - r.lhs) / r.rhs.max(1.0));
            }
            let r = check_desymmetrization(&inst, j)?;
            desym.record(r.holds, r.lhs - r.rhs);
        }
    }
    Ok([sym, exp, desym])
}

/// Exact coverage `>= 1 - zeta` for every formula, `zeta` in {0.1, 0.2},
/// `lambda` in {1, 5, 25}.
pub fn coverage_battery(seed: u64, count: usize) -> Result<BatteryResult> {
    let mut b = BatteryResult::new("exact bound coverage");
    for c in 0..count {
        let inst = random_instance(battery_seed(seed, 2, c as u64), InstanceShape::default());
        for zeta in [0.1, 0.2] {
            for lambda in [1.0, 5.0, 25.0] {
                for f in CoverageFormula::ALL {
                    let cov = exact_bound_coverage(&inst, lambda, zeta, f)?;
                    let margin = cov.probability - (1.0 - zeta);
                    b.record(margin >= -SLACK, margin);
                }
            }
        }
    }
    Ok(b)
}

/// `I1 <= Iinf` and `max log ratio = Iinf` under the optimized prior.
pub fn it_battery(seed: u64, count: usize) -> Result<BatteryResult> {
    let mut b = BatteryResult::new("information terms");
    let shape = InstanceShape {
        max_menu: MAX_MENU,
        ..InstanceShape::default()
    };
    for c in 0..count {
        let inst = random_instance(battery_seed(seed, 3, c as u64), shape);
        let it = finite_it_terms(&inst)?;
        let probs = inst.dataset_probs();
        let mut max_log = f64::NEG_INFINITY;
        let mut pointwise = true;
        for (s, row) in it.rn_table.iter().enumerate() {
            for (j, &r) in row.iter().enumerate() {
                if probs[s] > 0.0 && inst.kernel[s][j] > 0.0 {
                    let l = r.ln();
                    pointwise &= l <= it.iinf + SLACK;
                    max_log = max_log.max(l);
                }
            }
        }
        let attained = (max_log - it.iinf).abs() <= SLACK;
        let margin = it.iinf - it.i1;
        b.record(margin >= -SLACK && pointwise && attained, margin);
    }
    Ok(b)
}

/// Monte-Carlo Rademacher within `4 SE` of enumeration and below the Massart
/// bound plus `4 SE`.
pub fn rademacher_batteries(seed: u64, count: usize, draws: usize) -> Result<[BatteryResult; 2]> {
    let mut cal = BatteryResult::new("rademacher calibration");
    let mut mas = BatteryResult::new("massart domination");
    for c in 0..count {
        let mut rng = rng_from_seed(battery_seed(seed, 4, c as u64));
        let n = rng.random_range(1..=4);
        let k = rng.random_range(1..=3);
        let values: Vec<f64> = (0..n * k).map(|_| rng.random::<f64>()).collect();
        let lm = LossMatrix::from_row_major(n, k, values, 1.0)?;
        let exact = exact_rademacher_matrix(&lm)?;
        let mc = rademacher_mc(&lm, draws, battery_seed(seed, 5, c as u64))?;
        let tol = 4.0 * mc.std_error;
        // a zero standard error means every sign draw gave the same value
        let tol = if tol > 0.0 { tol } else { 1e-12 };
        let d = (mc.mean - exact).abs();
        cal.record(d <= tol, tol - d);
        let m = massart_bound(k, 1.0, n) + tol - mc.mean;
        mas.record(m >= 0.0, m);
    }
    Ok([cal, mas])
}

/// Gibbs posterior objective is no larger than that of `rivals` random
/// posteriors on each of `count` random menus.
pub fn gibbs_battery(seed: u64, count: usize, rivals: usize) -> Result<BatteryResult> {
    let mut b = BatteryResult::new("gibbs optimality");
    for c in 0..count {
        let mut rng = rng_from_seed(battery_seed(seed, 6, c as u64));
        let k = rng.random_range(2..=MAX_MENU);
        let scores: Vec<f64> = (0..k).map(|_| 3.0 * rng.random::<f64>()).collect();
        let prior = dirichlet_uniform(&mut rng, k);
        let lambda = 0.1 + 10.0 * rng.random::<f64>();
        let zeta = 0.05;
        let g = gibbs_rademacher_posterior(&scores, &prior, lambda)?;
        let best = gibbs_objective(&g, &scores, &prior, lambda, zeta);
        let mut margin = f64::INFINITY;
        for _ in 0..rivals {
            let rho = dirichlet_uniform(&mut rng, k);
            margin = margin.min(gibbs_objective(&rho, &scores, &prior, lambda, zeta) - best);
        }
        b.record(margin >= -SLACK, margin);
    }
    Ok(b)
}

/// Full exact battery, as run by the `oracle-suite` subcommand.
pub fn run_oracle_suite(seed: u64) -> Result<Vec<BatteryResult>> {
    let mut out = Vec::new();
    out.extend(lemma_batteries(seed, 100)?);
    out.push(coverage_battery(seed, 50)?);
    out.push(it_battery(seed, 100)?);
    out.extend(rademacher_batteries(seed, 50, 100_000)?);
    out.push(gibbs_battery(seed, 100, 100)?);
    Ok(out)
}
