//! Closed-form bound assembly, lambda optimization and the Gibbs-Rademacher
//! posterior.
//!
//! Every bound is returned as a [`BoundReport`] whose terms are signed, so
//! the value is always the plain sum of its terms. IT terms (KL, log
//! density ratios) are inputs here; they come from [`crate::dynamics`] or
//! [`crate::oracle`].

use std::collections::BTreeMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::complexity::Metric;
use crate::error::{Error, Result};
use crate::json::JsonReal;
use crate::scalar::Scalar;

/// Default for the unspecified absolute constants of the covering, fractal
/// and lower bounds: the `9/8` of the McDiarmid step.
pub const DEFAULT_RESIDUAL_CONSTANT: f64 = 9.0 / 8.0;

pub const SCHEMA_VERSION: &str = "v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormulaId {
    GenericSubgaussian,
    RademacherUpper,
    RademacherUpperClosed,
    MgfFiniteUpper,
    CoveringDataDependent,
    CoveringEuclidean,
    FractalDataDependent,
    FractalEuclidean,
    RademacherLower,
    SgldUpper,
    CldBrownianUpper,
    BaselineRademacher,
    BaselinePacBayes,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Upper,
    Lower,
}

/// Named bound terms, in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    /// Rademacher, covering or dimension term.
    Complexity,
    /// Scale discretization (`2 delta`, `2 L delta`, `2/n`, `2L/n`).
    Discretization,
    /// `B / (2 sqrt n)` in the lower bound.
    Deviation,
    /// `log E|W| / lambda` or `log T / lambda`.
    Cardinality,
    /// IT term over lambda.
    Information,
    /// `log(1/zeta) / lambda`.
    Confidence,
    /// `lambda`-linear remainder.
    Residual,
    /// Lambda-free square-root term of the closed forms.
    Concentration,
}

impl Term {
    pub const ALL: [Term; 8] = [
        Term::Complexity,
        Term::Discretization,
        Term::Deviation,
        Term::Cardinality,
        Term::Information,
        Term::Confidence,
        Term::Residual,
        Term::Concentration,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::Complexity => "complexity",
            Term::Discretization => "discretization",
            Term::Deviation => "deviation",
            Term::Cardinality => "cardinality",
            Term::Information => "information",
            Term::Confidence => "confidence",
            Term::Residual => "residual",
            Term::Concentration => "concentration",
        }
    }
}

/// Fixed `lambda` or the analytic minimizer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Lambda<T> {
    Fixed(T),
    Optimize,
}

impl<T: Scalar> Serialize for Lambda<T> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Lambda::Fixed(v) => JsonReal(v.to_f64_lossy()).serialize(s),
            Lambda::Optimize => s.serialize_str("optimize"),
        }
    }
}

impl<'de, T: Scalar> Deserialize<'de> for Lambda<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Lambda::Fixed(T::lit(v))),
            Raw::Word(w) if w == "optimize" || w == "optimized" => Ok(Lambda::Optimize),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "lambda must be a number or \"optimize\", got {w:?}"
            ))),
        }
    }
}

/// Itemized bound.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport<T> {
    pub formula: FormulaId,
    pub side: Side,
    /// Signed terms in canonical order; `value` is their sum.
    pub terms: Vec<(Term, T)>,
    pub value: T,
    /// The `lambda` used, if the formula has one.
    pub lambda: Option<T>,
    pub lambda_optimized: bool,
    pub zeta: T,
    /// Extra failure probability of multi-event statements.
    pub gamma: Option<T>,
    /// Value of the absolute-constant knob stamped into the formula.
    pub constant: Option<T>,
    /// Claimed probability that the bound holds.
    pub confidence_level: T,
    /// Set when validity rests on assumptions the data cannot check.
    pub assumption_conditional: bool,
}

impl<T: Scalar> BoundReport<T> {
    fn assemble(formula: FormulaId, side: Side, zeta: T, mut terms: Vec<(Term, T)>) -> Self {
        terms.sort_by_key(|t| t.0);
        let value = terms.iter().map(|t| t.1).fold(T::zero(), |a, b| a + b);
        Self {
            formula,
            side,
            terms,
            value,
            lambda: None,
            lambda_optimized: false,
            zeta,
            gamma: None,
            constant: None,
            confidence_level: T::one() - zeta,
            assumption_conditional: false,
        }
    }

    /// Value of a term, zero when absent.
    pub fn term(&self, t: Term) -> T {
        self.terms.iter().find(|x| x.0 == t).map_or(T::zero(), |x| x.1)
    }

    pub fn term_sum(&self) -> T {
        self.terms.iter().map(|t| t.1).fold(T::zero(), |a, b| a + b)
    }

    /// Whether the bound holds for the measured quantity `empirical`.
    pub fn covers(&self, empirical: T) -> bool {
        match self.side {
            Side::Upper => empirical <= self.value,
            Side::Lower => empirical >= self.value,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ReportWire {
    schema: String,
    formula: FormulaId,
    side: Side,
    value: JsonReal,
    lambda: Option<JsonReal>,
    lambda_optimized: bool,
    zeta: JsonReal,
    gamma: Option<JsonReal>,
    constant: Option<JsonReal>,
    confidence_level: JsonReal,
    assumption_conditional: bool,
    #[serde(flatten)]
    terms: BTreeMap<Term, JsonReal>,
}

fn jr<T: Scalar>(v: T) -> JsonReal {
    JsonReal(v.to_f64_lossy())
}

impl<T: Scalar> Serialize for BoundReport<T> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ReportWire {
            schema: SCHEMA_VERSION.into(),
            formula: self.formula,
            side: self.side,
            value: jr(self.value),
            lambda: self.lambda.map(jr),
            lambda_optimized: self.lambda_optimized,
            zeta: jr(self.zeta),
            gamma: self.gamma.map(jr),
            constant: self.constant.map(jr),
            confidence_level: jr(self.confidence_level),
            assumption_conditional: self.assumption_conditional,
            terms: self.terms.iter().map(|&(t, v)| (t, jr(v))).collect(),
        }
        .serialize(s)
    }
}

impl<'de, T: Scalar> Deserialize<'de> for BoundReport<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let w = ReportWire::deserialize(d)?;
        if w.schema != SCHEMA_VERSION {
            return Err(serde::de::Error::custom(format!(
                "unsupported report schema {:?}",
                w.schema
            )));
        }
        let t = |r: JsonReal| T::lit(r.0);
        Ok(BoundReport {
            formula: w.formula,
            side: w.side,
            terms: w.terms.into_iter().map(|(k, v)| (k, t(v))).collect(),
            value: t(w.value),
            lambda: w.lambda.map(t),
            lambda_optimized: w.lambda_optimized,
            zeta: t(w.zeta),
            gamma: w.gamma.map(t),
            constant: w.constant.map(t),
            confidence_level: t(w.confidence_level),
            assumption_conditional: w.assumption_conditional,
        })
    }
}

fn check_zeta<T: Scalar>(zeta: T) -> Result<()> {
    if zeta > T::zero() && zeta < T::one() {
        Ok(())
    } else {
        Err(Error::Domain(format!("zeta must lie in (0,1), got {zeta}")))
    }
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        Err(Error::Domain("sample size must be >= 1".into()))
    } else {
        Ok(())
    }
}

fn check_nonneg<T: Scalar>(v: T, what: &str) -> Result<()> {
    if v >= T::zero() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{what} must be >= 0, got {v}")))
    }
}

fn check_pos<T: Scalar>(v: T, what: &str) -> Result<()> {
    if v > T::zero() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{what} must be > 0, got {v}")))
    }
}

/// Minimizer `sqrt(a/c)` of `a/lambda + c lambda`.
pub fn optimal_lambda<T: Scalar>(numerator: T, coeff: T) -> Result<T> {
    if !(numerator > T::zero() && numerator.is_finite()) || !(coeff > T::zero() && coeff.is_finite()) {
        return Err(Error::Domain(format!(
            "lambda optimization needs a positive numerator and coefficient, got {numerator} and {coeff}"
        )));
    }
    Ok((numerator / coeff).sqrt())
}

/// Numerator parts over lambda plus `coeff * lambda`, with the given sign.
struct LambdaPart<T> {
    over_lambda: Vec<(Term, T)>,
    coeff: T,
}

fn with_lambda<T: Scalar>(
    formula: FormulaId,
    side: Side,
    zeta: T,
    mut fixed: Vec<(Term, T)>,
    part: LambdaPart<T>,
    lambda: Lambda<T>,
) -> Result<BoundReport<T>> {
    let sign = match side {
        Side::Upper => T::one(),
        Side::Lower => -T::one(),
    };
    let (lam, optimized) = match lambda {
        Lambda::Fixed(l) => {
            if !(l > T::zero() && l.is_finite()) {
                return Err(Error::Domain(format!("lambda must be finite and > 0, got {l}")));
            }
            (l, false)
        }
        Lambda::Optimize => {
            let a = part.over_lambda.iter().map(|t| t.1).fold(T::zero(), |x, y| x + y);
            if a == T::infinity() {
                // every lambda gives an infinite bound
                (T::one(), false)
            } else {
                (optimal_lambda(a, part.coeff)?, true)
            }
        }
    };
    for (t, v) in part.over_lambda {
        fixed.push((t, sign * v / lam));
    }
    fixed.push((Term::Residual, sign * part.coeff * lam));
    let mut r = BoundReport::assemble(formula, side, zeta, fixed);
    r.lambda = Some(lam);
    r.lambda_optimized = optimized;
    Ok(r)
}

fn ln_inv<T: Scalar>(zeta: T) -> T {
    zeta.recip().ln()
}

/// `(IT + log(1/zeta)) / lambda + lambda * residual_coeff`.
pub fn generic_subgaussian_bound<T: Scalar>(it: T, zeta: T, lambda: Lambda<T>, residual_coeff: T) -> Result<BoundReport<T>> {
    check_zeta(zeta)?;
    check_nonneg(residual_coeff, "residual coefficient")?;
    with_lambda(
        FormulaId::GenericSubgaussian,
        Side::Upper,
        zeta,
        vec![],
        LambdaPart {
            over_lambda: vec![(Term::Information, it), (Term::Confidence, ln_inv(zeta))],
            coeff: residual_coeff,
        },
        lambda,
    )
}

fn mcdiarmid_coeff<T: Scalar>(c: T, bound: T, n: usize) -> T {
    c * bound * bound / T::from_usize_lossy(n)
}

/// `2 rad + (IT + log(1/zeta)) / lambda + lambda 9 B^2 / (8 n)`.
pub fn pacbayes_rademacher_upper<T: Scalar>(
    rad: T,
    it: T,
    bound: T,
    n: usize,
    zeta: T,
    lambda: Lambda<T>,
) -> Result<BoundReport<T>> {
    rademacher_upper_as(FormulaId::RademacherUpper, rad, it, bound, n, zeta, lambda)
}

fn rademacher_upper_as<T: Scalar>(
    formula: FormulaId,
    rad: T,
    it: T,
    bound: T,
    n: usize,
    zeta: T,
    lambda: Lambda<T>,
) -> Result<BoundReport<T>> {
    check_zeta(zeta)?;
    check_n(n)?;
    check_pos(bound, "B")?;
    let c = T::lit(DEFAULT_RESIDUAL_CONSTANT);
    let mut r = with_lambda(
        formula,
        Side::Upper,
        zeta,
        vec![(Term::Complexity, T::lit(2.0) * rad)],
        LambdaPart {
            over_lambda: vec![(Term::Information, it), (Term::Confidence, ln_inv(zeta))],
            coeff: mcdiarmid_coeff(c, bound, n),
        },
        lambda,
    )?;
    r.constant = Some(c);
    Ok(r)
}

/// Lambda-free form `2 rad + 6 B sqrt((KL + log(2/zeta)) / (2n))`.
pub fn pacbayes_rademacher_upper_closed<T: Scalar>(
    rad: T,
    kl: T,
    bound: T,
    n: usize,
    zeta: T,
) -> Result<BoundReport<T>> {
    check_zeta(zeta)?;
    check_n(n)?;
    let two = T::lit(2.0);
    let conc = T::lit(6.0) * bound * ((kl + (two / zeta).ln()) / (two * T::from_usize_lossy(n))).sqrt();
    Ok(BoundReport::assemble(
        FormulaId::RademacherUpperClosed,
        Side::Upper,
        zeta,
        vec![(Term::Complexity, two * rad), (Term::Concentration, conc)],
    ))
}

/// Almost surely finite sets:
/// `(log E|W| + IT + log(1/zeta)) / lambda + 2 lambda B^2 / n`.
pub fn mgf_finite_upper<T: Scalar>(
    expected_cardinality: T,
    it: T,
    bound: T,
    n: usize,
    zeta: T,
    lambda: Lambda<T>,
) -> Result<BoundReport<T>> {
    check_zeta(zeta)?;
    check_n(n)?;
    if !(expected_cardinality >= T::one()) {
        return Err(Error::Domain(format!(
            "expected cardinality must be >= 1, got {expected_cardinality}"
        )));
    }
    with_lambda(
        FormulaId::MgfFiniteUpper,
        Side::Upper,
        zeta,
        vec![],
        LambdaPart {
            over_lambda: vec![
                (Term::Cardinality, expected_cardinality.ln()),
                (Term::Information, it),
                (Term::Confidence, ln_inv(zeta)),
            ],
            coeff: T::lit(2.0) * bound * bound / T::from_usize_lossy(n),
        },
        lambda,
    )
}

/// Covering bound at scale `delta` with `cover_size` balls:
/// `2 delta` (data-dependent) or `2 L delta` (Euclidean)
/// `+ 2B sqrt(2 log N / n) + (IT + log(1/zeta))/lambda + C lambda B^2 / n`.
#[allow(clippy::too_many_arguments)]
pub fn covering_upper<T: Scalar>(
    delta: T,
    cover_size: usize,
    bound: T,
    n: usize,
    it: T,
    zeta: T,
    lambda: Lambda<T>,
    metric: Metric,
    lipschitz: Option<T>,
    constant: T,
) -> Result<BoundReport<T>> {
    check_zeta(zeta)?;
    check_n(n)?;
    check_nonneg(delta, "delta")?;
    if cover_size == 0 {
        return Err(Error::Domain("cover size must be >= 1".into()));
    }
    let two = T::lit(2.0);
    let nf = T::from_usize_lossy(n);
    let (formula, disc) = match metric {
        Metric::DataDependent => (FormulaId::CoveringDataDependent, two * delta),
        Metric::Euclidean => {
            let l = lipschitz.ok_or_else(|| {
                Error::Config("the Euclidean covering bound needs a Lipschitz constant".into())
            })?;
            (FormulaId::CoveringEuclidean, two * l * delta)
        }
    };
    let comp = two * bound * (two * T::from_usize_lossy(cover_size).ln() / nf).sqrt();
    let mut r = with_lambda(
        formula,
        Side::Upper,
        zeta,
        vec![(Term::Discretization, disc), (Term::Complexity, comp)],
        LambdaPart {
            over_lambda: vec![(Term::Information, it), (Term::Confidence, ln_inv(zeta))],
            coeff: mcdiarmid_coeff(constant, bound, n),
        },
        lambda,
    )?;
    r.constant = Some(constant);
    Ok(r)
}

/// Fractal-dimension bounds. Data-dependent:
/// `2/n + 2B sqrt(2 (dim+eps) log n / n) + ...`, confidence `1 - zeta - gamma`.
/// Euclidean: `2L/n + 4B sqrt((dim+eps) log n / (2n)) + ...`, confidence
/// `1 - zeta - 3 gamma`. Both rest on asymptotic assumptions and are flagged.
#[allow(clippy::too_many_arguments)]
pub fn fractal_upper<T: Scalar>(
    dim: T,
    eps: T,
    n: usize,
    bound: T,
    it: T,
    zeta: T,
    gamma: T,
    lambda: Lambda<T>,
    metric: Metric,
    lipschitz: Option<T>,
    constant: T,
) -> Result<BoundReport<T>> {
    check_zeta(zeta)?;
    check_nonneg(dim, "dimension")?;
    check_pos(eps, "epsilon")?;
    check_nonneg(gamma, "gamma")?;
    if n < 2 {
        return Err(Error::Domain("fractal bounds need n >= 2".into()));
    }
    let two = T::lit(2.0);
    let nf = T::from_usize_lossy(n);
    let ln_n = nf.ln();
    let (formula, disc, comp, debit) = match metric {
        Metric::DataDependent => (
            FormulaId::FractalDataDependent,
            two / nf,
            two * bound * (two * (dim + eps) * ln_n / nf).sqrt(),
            gamma,
        ),
        Metric::Euclidean => {
            let l = lipschitz.ok_or_else(|| {
                Error::Config("the Euclidean fractal bound needs a Lipschitz constant".into())
            })?;
            (
                FormulaId::FractalEuclidean,
                two * l / nf,
                T::lit(4.0) * bound * ((dim + eps) * ln_n / (two * nf)).sqrt(),
                T::lit(3.0) * gamma,
            )
        }
    };
    let mut r = with_lambda(
        formula,
        Side::Upper,
        zeta,
        vec![(Term::Discretization, disc), (Term::Complexity, comp)],
        LambdaPart {
            over_lambda: vec![(Term::Information, it), (Term::Confidence, ln_inv(zeta))],
            coeff: mcdiarmid_coeff(constant, bound, n),
        },
        lambda,
    )?;
    r.constant = Some(constant);
    r.gamma = Some(gamma);
    r.confidence_level = T::one() - zeta - debit;
    r.assumption_conditional = true;
    Ok(r)
}

/// Lower bound on the absolute gap:
/// `rad/2 - B/(2 sqrt n) - (IT + log(1/zeta))/lambda - C B^2 lambda / n`.
pub fn lower_bound<T: Scalar>(
    rad: T,
    bound: T,
    n: usize,
    it: T,
    zeta: T,
    lambda: Lambda<T>,
    constant: T,
) -> Result<BoundReport<T>> {
    check_zeta(zeta)?;
    check_n(n)?;
    let half = T::lit(0.5);
    let nf = T::from_usize_lossy(n);
    let mut r = with_lambda(
        FormulaId::RademacherLower,
        Side::Lower,
        zeta,
        vec![
            (Term::Complexity, half * rad),
            (Term::Deviation, -(half * bound / nf.sqrt())),
        ],
        LambdaPart {
            over_lambda: vec![(Term::Information, it), (Term::Confidence, ln_inv(zeta))],
            coeff: mcdiarmid_coeff(constant, bound, n),
        },
        lambda,
    )?;
    r.constant = Some(constant);
    Ok(r)
}

/// SGLD trajectory bound `(log(T/zeta) + KL)/lambda + 2 lambda B^2 / n` over
/// the `T` iterates.
pub fn sgld_upper<T: Scalar>(
    kl: T,
    iterations: usize,
    bound: T,
    n: usize,
    zeta: T,
    lambda: Lambda<T>,
) -> Result<BoundReport<T>> {
    check_zeta(zeta)?;
    check_n(n)?;
    check_nonneg(kl, "KL")?;
    if iterations == 0 {
        return Err(Error::Domain("iteration count must be >= 1".into()));
    }
    with_lambda(
        FormulaId::SgldUpper,
        Side::Upper,
        zeta,
        vec![],
        LambdaPart {
            over_lambda: vec![
                (Term::Cardinality, T::from_usize_lossy(iterations).ln()),
                (Term::Information, kl),
                (Term::Confidence, ln_inv(zeta)),
            ],
            coeff: T::lit(2.0) * bound * bound / T::from_usize_lossy(n),
        },
        lambda,
    )
}

/// Optimized SGLD bound for an `L`-Lipschitz loss, where the KL is replaced
/// by `beta L^2 sum(eta) / 4`:
/// `2B sqrt((4 log(T/zeta) + beta L^2 sum(eta)) / (2n))`.
pub fn sgld_lipschitz_closed<T: Scalar>(
    lipschitz: T,
    beta: T,
    eta_sum: T,
    iterations: usize,
    bound: T,
    n: usize,
    zeta: T,
) -> Result<T> {
    check_zeta(zeta)?;
    check_n(n)?;
    let t = T::from_usize_lossy(iterations);
    let two = T::lit(2.0);
    let inner = T::lit(4.0) * (t / zeta).ln() + beta * lipschitz * lipschitz * eta_sum;
    Ok(two * bound * (inner / (two * T::from_usize_lossy(n))).sqrt())
}

/// Langevin bound with a Brownian-motion prior:
/// `2 rad + KL/lambda + log(1/zeta)/lambda + lambda 9B^2/(8n)`.
pub fn cld_upper_brownian<T: Scalar>(
    rad: T,
    kl: T,
    bound: T,
    n: usize,
    zeta: T,
    lambda: Lambda<T>,
) -> Result<BoundReport<T>> {
    rademacher_upper_as(FormulaId::CldBrownianUpper, rad, kl, bound, n, zeta, lambda)
}

/// Data-independent Rademacher bound `2 rad + 3B sqrt(log(1/zeta) / (2n))`.
pub fn baseline_rademacher<T: Scalar>(rad: T, bound: T, n: usize, zeta: T) -> Result<BoundReport<T>> {
    check_zeta(zeta)?;
    check_n(n)?;
    let two = T::lit(2.0);
    let conc = T::lit(3.0) * bound * (ln_inv(zeta) / (two * T::from_usize_lossy(n))).sqrt();
    Ok(BoundReport::assemble(
        FormulaId::BaselineRademacher,
        Side::Upper,
        zeta,
        vec![(Term::Complexity, two * rad), (Term::Concentration, conc)],
    ))
}

/// Classical PAC-Bayes bound for `[0,1]` losses, rescaled by `B`:
/// `B sqrt((KL + log(2 sqrt(n) / zeta)) / (2n))`.
pub fn baseline_pac_bayes<T: Scalar>(kl: T, bound: T, n: usize, zeta: T) -> Result<BoundReport<T>> {
    check_zeta(zeta)?;
    check_n(n)?;
    check_nonneg(kl, "KL")?;
    let two = T::lit(2.0);
    let nf = T::from_usize_lossy(n);
    let conc = bound * ((kl + (two * nf.sqrt() / zeta).ln()) / (two * nf)).sqrt();
    Ok(BoundReport::assemble(
        FormulaId::BaselinePacBayes,
        Side::Upper,
        zeta,
        vec![(Term::Concentration, conc)],
    ))
}

/// Posterior `rho_j ∝ prior_j exp(-lambda score_j)`, with scores
/// `sup R_S + 2 Rad` per menu entry.
pub fn gibbs_rademacher_posterior<T: Scalar>(scores: &[T], prior: &[T], lambda: T) -> Result<Vec<T>> {
    if scores.len() != prior.len() || scores.is_empty() {
        return Err(Error::Domain("scores and prior must be nonempty and of equal length".into()));
    }
    if prior.iter().any(|&p| !(p >= T::zero())) {
        return Err(Error::Domain("prior weights must be nonnegative".into()));
    }
    check_nonneg(lambda, "lambda")?;
    if lambda == T::zero() {
        return Ok(prior.to_vec());
    }
    let logw: Vec<T> = scores
        .iter()
        .zip(prior)
        .map(|(&s, &p)| {
            if p > T::zero() && s < T::infinity() {
                p.ln() - lambda * s
            } else {
                T::neg_infinity()
            }
        })
        .collect();
    let top = logw.iter().copied().fold(T::neg_infinity(), T::max);
    if !top.is_finite() {
        return Err(Error::Degenerate(
            "every set with prior mass has an infinite score".into(),
        ));
    }
    let w: Vec<T> = logw.iter().map(|&l| (l - top).exp()).collect();
    let z: T = w.iter().copied().sum();
    Ok(w.into_iter().map(|v| v / z).collect())
}

/// `KL(rho || pi)` for discrete weights; infinite if `rho` is not
/// absolutely continuous.
pub fn kl_discrete<T: Scalar>(rho: &[T], pi: &[T]) -> T {
    let mut s = T::zero();
    for (&r, &p) in rho.iter().zip(pi) {
        if r > T::zero() {
            if p <= T::zero() {
                return T::infinity();
            }
            s += r * (r / p).ln();
        }
    }
    s
}

/// `E_rho score + (KL(rho || pi) + log(1/zeta)) / lambda`.
pub fn gibbs_objective<T: Scalar>(rho: &[T], scores: &[T], prior: &[T], lambda: T, zeta: T) -> T {
    let e: T = rho
        .iter()
        .zip(scores)
        .filter(|(&r, _)| r > T::zero())
        .map(|(&r, &s)| r * s)
        .sum();
    e + (kl_discrete(rho, prior) + ln_inv(zeta)) / lambda
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_json_is_flat_and_round_trips() {
        let r = sgld_upper(1.0, 10, 1.0, 50, 0.1, Lambda::Optimize).unwrap();
        let s = serde_json::to_string(&r).unwrap();
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["schema"], "v1");
        assert_eq!(v["formula"], "sgld_upper");
        assert!(v["residual"].is_number());
        let back: BoundReport<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn infinite_values_survive_json() {
        let r = sgld_upper(f64::INFINITY, 3, 1.0, 10, 0.1, Lambda::Fixed(1.0)).unwrap();
        assert!(r.value.is_infinite());
        let s = serde_json::to_string(&r).unwrap();
        let back: BoundReport<f64> = serde_json::from_str(&s).unwrap();
        assert!(back.value.is_infinite());
    }

    #[test]
    fn optimize_needs_positive_parts() {
        let e = generic_subgaussian_bound(0.0, 0.999_999, Lambda::Optimize, 0.0);
        assert!(matches!(e, Err(Error::Domain(_))));
    }

    #[test]
    fn euclidean_without_lipschitz() {
        let e = covering_upper(0.1, 4, 1.0, 10, 0.0, 0.1, Lambda::Fixed(1.0), Metric::Euclidean, None, 1.125);
        assert!(matches!(e, Err(Error::Config(_))));
    }

    #[test]
    fn lambda_serde() {
        let a: Lambda<f64> = serde_json::from_str("\"optimize\"").unwrap();
        assert_eq!(a, Lambda::Optimize);
        let b: Lambda<f64> = serde_json::from_str("2.5").unwrap();
        assert_eq!(b, Lambda::Fixed(2.5));
    }
}
