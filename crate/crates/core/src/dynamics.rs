//! SGLD and Euler-Maruyama Langevin simulation with Girsanov KL statistics.
//!
//! The recursion is
//! `W_{k} = W_{k-1} - eta_k g_k + sigma_k eps_k`, `sigma_k = sqrt(2 eta_k / beta)`,
//! where `g_k` is the (minibatch) gradient of the empirical risk at
//! `W_{k-1}` and `eps_k` is standard normal.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::problem::{grad_empirical, grad_minibatch, grad_population, DataDistribution, Dataset, LossModel};
use crate::rng::{rng_from_seed, standard_normal};
use crate::scalar::{dist_sq, dot, norm_sq, Scalar};

/// Minibatch size: the whole sample or a fixed count drawn with replacement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BatchSize {
    Full(FullBatch),
    Size(usize),
}

/// Serializes as the string `"full"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FullBatch {
    Full,
}

impl BatchSize {
    pub const FULL: BatchSize = BatchSize::Full(FullBatch::Full);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgldConfig<T> {
    /// Number of steps `T`.
    pub iterations: usize,
    /// Step sizes `eta_1..eta_T`.
    pub eta: Vec<T>,
    pub beta: T,
    pub batch_size: BatchSize,
    pub w0: Vec<T>,
    pub seed: u64,
    /// Run with `sigma = 0` (the `beta -> infinity` limit): plain gradient
    /// descent. Noise is still drawn and stored so the stream is unchanged.
    #[serde(default)]
    pub noiseless: bool,
}

impl<T: Scalar> SgldConfig<T> {
    pub fn constant_step(iterations: usize, eta: T, beta: T, w0: Vec<T>, seed: u64) -> Self {
        Self {
            iterations,
            eta: vec![eta; iterations],
            beta,
            batch_size: BatchSize::FULL,
            w0,
            seed,
            noiseless: false,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iteration count must be >= 1".into()));
        }
        if self.eta.len() != self.iterations {
            return Err(Error::Config(format!(
                "step-size schedule has {} entries for {} iterations",
                self.eta.len(),
                self.iterations
            )));
        }
        if self.eta.iter().any(|&e| !(e > T::zero() && e.is_finite())) {
            return Err(Error::Config("step sizes must be finite and > 0".into()));
        }
        if !(self.beta > T::zero() && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be finite and > 0, got {}", self.beta)));
        }
        if !self.noiseless && self.eta.iter().any(|&e| sigma_of(e, self.beta) <= T::zero()) {
            return Err(Error::Config("noise scale underflows to zero".into()));
        }
        if let BatchSize::Size(b) = self.batch_size {
            if b == 0 || b > n {
                return Err(Error::Config(format!("batch size must lie in [1, {n}], got {b}")));
            }
        }
        if self.w0.is_empty() || self.w0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("initial weights must be finite and nonempty".into()));
        }
        Ok(())
    }
}

fn sigma_of<T: Scalar>(eta: T, beta: T) -> T {
    (T::lit(2.0) * eta / beta).sqrt()
}

/// A simulated path. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T> {
    weights: Vec<Vec<T>>,
    grads: Vec<Vec<T>>,
    noises: Vec<Vec<T>>,
    etas: Vec<T>,
    beta: T,
    full_batch: bool,
    noiseless: bool,
}

impl<T: Scalar> Trajectory<T> {
    /// Assembles a trajectory from stored fields. `weights` has one more
    /// entry than the per-step sequences.
    pub fn from_parts(
        weights: Vec<Vec<T>>,
        grads: Vec<Vec<T>>,
        noises: Vec<Vec<T>>,
        etas: Vec<T>,
        beta: T,
        full_batch: bool,
        noiseless: bool,
    ) -> Result<Self> {
        let steps = etas.len();
        if weights.len() != steps + 1 || grads.len() != steps || noises.len() != steps {
            return Err(Error::Config("trajectory field lengths are inconsistent".into()));
        }
        let d = weights[0].len();
        for v in weights.iter().chain(&grads).chain(&noises) {
            check_dim(d, v.len())?;
        }
        Ok(Self {
            weights,
            grads,
            noises,
            etas,
            beta,
            full_batch,
            noiseless,
        })
    }

    /// `W_0..W_T`.
    pub fn weights(&self) -> &[Vec<T>] {
        &self.weights
    }

    /// `W_1..W_T`, the hypothesis set used by the SGLD bound.
    pub fn iterates(&self) -> &[Vec<T>] {
        &self.weights[1..]
    }

    /// `g_1..g_T`.
    pub fn grads(&self) -> &[Vec<T>] {
        &self.grads
    }

    pub fn noises(&self) -> &[Vec<T>] {
        &self.noises
    }

    pub fn etas(&self) -> &[T] {
        &self.etas
    }

    pub fn beta(&self) -> T {
        self.beta
    }

    pub fn steps(&self) -> usize {
        self.etas.len()
    }

    pub fn dim(&self) -> usize {
        self.weights[0].len()
    }

    pub fn is_full_batch(&self) -> bool {
        self.full_batch
    }

    pub fn is_noiseless(&self) -> bool {
        self.noiseless
    }

    pub fn sigma(&self, k: usize) -> T {
        if self.noiseless {
            T::zero()
        } else {
            sigma_of(self.etas[k], self.beta)
        }
    }

    /// Total time `sum eta_k`.
    pub fn horizon(&self) -> T {
        self.etas.iter().copied().sum()
    }

    pub fn max_step(&self) -> T {
        self.etas.iter().copied().fold(T::zero(), T::max)
    }

    /// Largest deviation between stored `W_{k}` and the recursion applied to
    /// the stored `W_{k-1}`, `g_k`, `eps_k`.
    pub fn reconstruction_error(&self) -> T {
        let mut worst = T::zero();
        for k in 0..self.steps() {
            let s = self.sigma(k);
            for (i, &w) in self.weights[k].iter().enumerate() {
                let next = step_coord(w, self.etas[k], self.grads[k][i], s, self.noises[k][i]);
                worst = worst.max((next - self.weights[k + 1][i]).abs());
            }
        }
        worst
    }
}

#[inline]
fn step_coord<T: Scalar>(w: T, eta: T, g: T, sigma: T, eps: T) -> T {
    w - eta * g + sigma * eps
}

/// Simulates SGLD. Minibatch indices are drawn uniformly with replacement
/// before the noise of each step, from one ChaCha8 stream seeded by
/// `config.seed`.
pub fn run_sgld<T: Scalar>(config: &SgldConfig<T>, model: &LossModel<T>, data: &Dataset<T>) -> Result<Trajectory<T>> {
    let n = data.len();
    if n == 0 {
        return Err(Error::EmptyInput("empty dataset".into()));
    }
    config.validate(n)?;
    if !model.is_differentiable() {
        return Err(Error::Capability("SGLD needs a differentiable loss".into()));
    }
    check_dim(data.dimension(), config.w0.len())?;
    let steps = config.iterations;
    let d = config.w0.len();
    let full = matches!(config.batch_size, BatchSize::Full(_));
    let mut rng = rng_from_seed(config.seed);
    let mut weights = Vec::with_capacity(steps + 1);
    let mut grads = Vec::with_capacity(steps);
    let mut noises = Vec::with_capacity(steps);
    weights.push(config.w0.clone());
    let mut idx = Vec::new();
    for k in 0..steps {
        let w = &weights[k];
        let g = match config.batch_size {
            BatchSize::Full(_) => grad_empirical(model, w, data)?,
            BatchSize::Size(b) => {
                idx.clear();
                idx.extend((0..b).map(|_| rng.random_range(0..n)));
                grad_minibatch(model, w, data, &idx)?
            }
        };
        let eps: Vec<T> = (0..d).map(|_| T::lit(standard_normal(&mut rng))).collect();
        let eta = config.eta[k];
        let s = if config.noiseless { T::zero() } else { sigma_of(eta, config.beta) };
        let next: Vec<T> = (0..d).map(|i| step_coord(w[i], eta, g[i], s, eps[i])).collect();
        if next.iter().any(|v| !v.is_finite()) || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { last_finite_step: k });
        }
        weights.push(next);
        grads.push(g);
        noises.push(eps);
    }
    Ok(Trajectory {
        weights,
        grads,
        noises,
        etas: config.eta.clone(),
        beta: config.beta,
        full_batch: full,
        noiseless: config.noiseless,
    })
}

/// Euler-Maruyama discretization of continuous Langevin dynamics: SGLD with
/// full-batch gradients.
pub fn run_cld_euler<T: Scalar>(config: &SgldConfig<T>, model: &LossModel<T>, data: &Dataset<T>) -> Result<Trajectory<T>> {
    let mut c = config.clone();
    c.batch_size = BatchSize::FULL;
    run_sgld(&c, model, data)
}

// (beta/4) sum eta_k * q_k. Without noise the path law is singular, so any
// positive q makes the divergence infinite.
fn weighted_energy<T: Scalar>(traj: &Trajectory<T>, q: impl Iterator<Item = T>) -> T {
    let s: T = traj.etas.iter().zip(q).map(|(&e, q)| e * q).sum();
    if traj.noiseless {
        return if s > T::zero() { T::infinity() } else { T::zero() };
    }
    traj.beta / T::lit(4.0) * s
}

/// Per-path KL statistic `(beta/4) sum_k eta_k |g_k|^2`.
pub fn kl_sgld<T: Scalar>(traj: &Trajectory<T>) -> T {
    weighted_energy(traj, traj.grads.iter().map(|g| norm_sq(g)))
}

/// `(1 / (2 sigma^2)) sum_k eta_k |grad R_S(W_{k-1})|^2` with `sigma^2 = 2/beta`.
pub fn kl_brownian_prior<T: Scalar>(traj: &Trajectory<T>) -> Result<T> {
    if !traj.full_batch {
        return Err(Error::Misuse(
            "the Brownian-prior KL uses full-batch gradients; this trajectory used minibatches".into(),
        ));
    }
    let s: T = traj.etas.iter().zip(&traj.grads).map(|(&e, g)| e * norm_sq(g)).sum();
    if traj.noiseless {
        return Ok(if s > T::zero() { T::infinity() } else { T::zero() });
    }
    let sigma2 = T::lit(2.0) / traj.beta;
    Ok(s / (T::lit(2.0) * sigma2))
}

/// `(beta/4) sum_k eta_k |grad R_S(W_{k-1}) - grad R(W_{k-1})|^2`.
pub fn kl_expected_prior<T: Scalar>(
    traj: &Trajectory<T>,
    model: &LossModel<T>,
    data: &Dataset<T>,
    dist: &DataDistribution<T>,
) -> Result<T> {
    let mut q = Vec::with_capacity(traj.steps());
    for w in &traj.weights[..traj.steps()] {
        let ge = grad_empirical(model, w, data)?;
        let gp = grad_population(model, w, dist)?;
        q.push(dist_sq(&ge, &gp));
    }
    Ok(weighted_energy(traj, q.into_iter()))
}

/// `(beta/4) sum_k eta_k |grad R_S(W_{k-1}) - grad_f(W_{k-1})|^2` for an
/// arbitrary drift field `grad_f`.
pub fn kl_general_prior<T: Scalar, F>(
    traj: &Trajectory<T>,
    model: &LossModel<T>,
    data: &Dataset<T>,
    grad_f: F,
) -> Result<T>
where
    F: Fn(&[T]) -> Vec<T>,
{
    let mut q = Vec::with_capacity(traj.steps());
    for (k, w) in traj.weights[..traj.steps()].iter().enumerate() {
        let ge = if traj.full_batch {
            traj.grads[k].clone()
        } else {
            grad_empirical(model, w, data)?
        };
        let gf = grad_f(w);
        check_dim(ge.len(), gf.len())?;
        if gf.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("drift field is not finite at step {}", k + 1)));
        }
        q.push(dist_sq(&ge, &gf));
    }
    Ok(weighted_energy(traj, q.into_iter()))
}

/// A closed-form quantity valid with probability at least `confidence`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbableValue<T> {
    pub value: T,
    pub confidence: T,
}

/// High-probability bound on the expected-prior KL for an `L`-Lipschitz loss:
/// `log(1/zeta) + L^2 beta T / n + 2 beta^2 T^2 L^4 / n`, holding with
/// probability at least `1 - zeta`.
pub fn kl_expected_prior_bound<T: Scalar>(
    lipschitz: T,
    beta: T,
    time: T,
    n: usize,
    zeta: T,
) -> Result<ProbableValue<T>> {
    if !(zeta > T::zero() && zeta < T::one()) {
        return Err(Error::Domain(format!("zeta must lie in (0,1), got {zeta}")));
    }
    if n == 0 || lipschitz < T::zero() || !(beta > T::zero()) || !(time > T::zero()) {
        return Err(Error::Domain("L >= 0, beta > 0, T > 0 and n >= 1 are required".into()));
    }
    let nf = T::from_usize_lossy(n);
    let l2 = lipschitz * lipschitz;
    let value = zeta.recip().ln() + l2 * beta * time / nf + T::lit(2.0) * beta * beta * time * time * l2 * l2 / nf;
    Ok(ProbableValue {
        value,
        confidence: T::one() - zeta,
    })
}

/// `log Z_T = sum_k [(eta_k/sigma_k) <g_k, eps_k> - (eta_k^2 / (2 sigma_k^2)) |g_k|^2]`.
pub fn log_radon_nikodym_sgld<T: Scalar>(traj: &Trajectory<T>) -> Result<T> {
    let mut acc = T::zero();
    for k in 0..traj.steps() {
        let s = traj.sigma(k);
        if s <= T::zero() {
            return Err(Error::Domain(format!("step {} has zero noise scale", k + 1)));
        }
        let eta = traj.etas[k];
        let g = &traj.grads[k];
        let r = eta / s;
        acc += r * dot(g, &traj.noises[k]) - T::lit(0.5) * r * r * norm_sq(g);
    }
    Ok(acc)
}

const DUMP_MAGIC: &str = "# randset trajectory v1";

/// Writes a line-oriented text dump. The header line is
/// `# randset trajectory v1 d=<d> T=<T> beta=<beta> full_batch=<bool> noiseless=<bool>`,
/// followed by a column line `# k w_1..w_d g_1..g_d eps_1..eps_d eta` and
/// one row per index `k = 0..T`. Row 0 holds `W_0` and `-` in the step
/// columns.
pub fn write_trajectory<T: Scalar, W: Write>(traj: &Trajectory<T>, mut out: W) -> Result<()> {
    let d = traj.dim();
    writeln!(
        out,
        "{DUMP_MAGIC} d={d} T={} beta={} full_batch={} noiseless={}",
        traj.steps(),
        traj.beta,
        traj.full_batch,
        traj.noiseless
    )?;
    let mut cols = vec!["# k".to_string()];
    for p in ["w", "g", "eps"] {
        cols.extend((1..=d).map(|i| format!("{p}_{i}")));
    }
    cols.push("eta".into());
    writeln!(out, "{}", cols.join(" "))?;
    for k in 0..=traj.steps() {
        let mut row = vec![k.to_string()];
        row.extend(traj.weights[k].iter().map(|v| v.to_string()));
        if k == 0 {
            row.extend(std::iter::repeat_n("-".to_string(), 2 * d + 1));
        } else {
            row.extend(traj.grads[k - 1].iter().map(|v| v.to_string()));
            row.extend(traj.noises[k - 1].iter().map(|v| v.to_string()));
            row.push(traj.etas[k - 1].to_string());
        }
        writeln!(out, "{}", row.join(" "))?;
    }
    Ok(())
}

fn parse_num<T: Scalar>(s: &str, line: usize) -> Result<T> {
    T::from_str_radix(s, 10).map_err(|_| Error::Parse {
        line,
        message: format!("not a number: {s:?}"),
    })
}

/// Reads a dump produced by [`write_trajectory`].
pub fn read_trajectory<T: Scalar, R: BufRead>(input: R) -> Result<Trajectory<T>> {
    let mut lines = input.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "empty trajectory file".into(),
    })?;
    let header = header?;
    let rest = header.strip_prefix(DUMP_MAGIC).ok_or(Error::Parse {
        line: 1,
        message: "missing trajectory header".into(),
    })?;
    let mut d = None;
    let mut steps = None;
    let mut beta = None;
    let (mut full, mut noiseless) = (true, false);
    for kv in rest.split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or(Error::Parse {
            line: 1,
            message: format!("bad header field {kv:?}"),
        })?;
        let bad = || Error::Parse {
            line: 1,
            message: format!("bad value in {kv:?}"),
        };
        match k {
            "d" => d = Some(v.parse::<usize>().map_err(|_| bad())?),
            "T" => steps = Some(v.parse::<usize>().map_err(|_| bad())?),
            "beta" => beta = Some(parse_num::<T>(v, 1)?),
            "full_batch" => full = v.parse().map_err(|_| bad())?,
            "noiseless" => noiseless = v.parse().map_err(|_| bad())?,
            _ => {}
        }
    }
    let missing = |f: &str| Error::Parse {
        line: 1,
        message: format!("header lacks {f}"),
    };
    let d = d.ok_or_else(|| missing("d"))?;
    let steps = steps.ok_or_else(|| missing("T"))?;
    let beta = beta.ok_or_else(|| missing("beta"))?;
    let mut weights = Vec::with_capacity(steps + 1);
    let mut grads = Vec::with_capacity(steps);
    let mut noises = Vec::with_capacity(steps);
    let mut etas = Vec::with_capacity(steps);
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 * d + 2 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected {} fields, found {}", 3 * d + 2, f.len()),
            });
        }
        let k: usize = f[0].parse().map_err(|_| Error::Parse {
            line: lineno,
            message: "bad step index".into(),
        })?;
        if k != weights.len() {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected step {}, found {k}", weights.len()),
            });
        }
        let nums = |range: std::ops::Range<usize>| -> Result<Vec<T>> {
            f[range].iter().map(|s| parse_num::<T>(s, lineno)).collect()
        };
        weights.push(nums(1..1 + d)?);
        if k > 0 {
            grads.push(nums(1 + d..1 + 2 * d)?);
            noises.push(nums(1 + 2 * d..1 + 3 * d)?);
            etas.push(parse_num::<T>(f[1 + 3 * d], lineno)?);
        }
    }
    if weights.len() != steps + 1 {
        return Err(Error::Parse {
            line: 1,
            message: format!("header declares T={steps} but {} rows follow", weights.len()),
        });
    }
    Trajectory::from_parts(weights, grads, noises, etas, beta, full, noiseless)
}
