//! Data distributions, bounded losses, risks and worst-case gaps.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::{rng_from_seed, standard_normal, uniform01, SimRng};
use crate::scalar::{dot, norm_sq, Scalar};

/// A labelled example `z = (x, y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataPoint<T> {
    pub x: Vec<T>,
    pub y: T,
}

impl<T: Scalar> DataPoint<T> {
    pub fn new(x: Vec<T>, y: T) -> Self {
        Self { x, y }
    }
}

/// Synthetic data-generating distributions.
///
/// Only `FiniteSupport` admits exact population expectations. Parametric
/// kinds can be sampled, and [`DataDistribution::materialize`] turns them
/// into a large finite-support population when exact risks are needed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataDistribution<T> {
    FiniteSupport {
        atoms: Vec<DataPoint<T>>,
        probs: Vec<T>,
    },
    /// Two isotropic Gaussian classes with labels -1 (first mean) and +1
    /// (second mean).
    GaussianMixture {
        means: Vec<Vec<T>>,
        scale: T,
        class_priors: Vec<T>,
    },
    /// `x ~ N(0, diag(input_std^2))`, `y = <weight, x> + noise_std * xi`.
    LinearRegression {
        input_std: Vec<T>,
        weight: Vec<T>,
        noise_std: T,
    },
}

fn prob_tolerance<T: Scalar>(len: usize) -> f64 {
    let eps = T::epsilon().to_f64_lossy();
    1e-12_f64.max(4.0 * eps * len.max(1) as f64)
}

fn check_probs<T: Scalar>(probs: &[T], what: &str) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::Config(format!("{what}: no probabilities")));
    }
    let mut total = 0.0;
    for &p in probs {
        let p = p.to_f64_lossy();
        if !(p >= 0.0 && p.is_finite()) {
            return Err(Error::Config(format!("{what}: invalid probability {p}")));
        }
        total += p;
    }
    if (total - 1.0).abs() > prob_tolerance::<T>(probs.len()) {
        return Err(Error::Config(format!(
            "{what}: probabilities sum to {total}, not 1"
        )));
    }
    Ok(())
}

/// Inverse-CDF draw from a discrete distribution.
pub(crate) fn draw_index<T: Scalar>(probs: &[T], rng: &mut SimRng) -> usize {
    let u = uniform01(rng);
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p.to_f64_lossy();
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver above the last cumulative value
    probs
        .iter()
        .rposition(|&p| p > T::zero())
        .unwrap_or(probs.len() - 1)
}

fn is_uniform<T: Scalar>(probs: &[T]) -> bool {
    probs.iter().all(|&p| p == probs[0])
}

impl<T: Scalar> DataDistribution<T> {
    pub fn point_mass(z: DataPoint<T>) -> Self {
        Self::FiniteSupport {
            atoms: vec![z],
            probs: vec![T::one()],
        }
    }

    /// Uniform distribution over the points of `data` (duplicates keep
    /// their multiplicity).
    pub fn empirical(data: &Dataset<T>) -> Self {
        let n = T::from_usize_lossy(data.points.len());
        Self::FiniteSupport {
            atoms: data.points.clone(),
            probs: vec![T::one() / n; data.points.len()],
        }
    }

    /// Dimension of the input `x`.
    pub fn dimension(&self) -> usize {
        match self {
            Self::FiniteSupport { atoms, .. } => atoms.first().map_or(0, |a| a.x.len()),
            Self::GaussianMixture { means, .. } => means.first().map_or(0, Vec::len),
            Self::LinearRegression { input_std, .. } => input_std.len(),
        }
    }

    pub fn is_finite_support(&self) -> bool {
        matches!(self, Self::FiniteSupport { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::FiniteSupport { atoms, probs } => {
                if atoms.is_empty() {
                    return Err(Error::Config("finite support has no atoms".into()));
                }
                if atoms.len() != probs.len() {
                    return Err(Error::Config(format!(
                        "{} atoms but {} probabilities",
                        atoms.len(),
                        probs.len()
                    )));
                }
                let d = atoms[0].x.len();
                if atoms.iter().any(|a| a.x.len() != d) {
                    return Err(Error::Config("atoms have differing dimensions".into()));
                }
                check_probs(probs, "finite support")
            }
            Self::GaussianMixture {
                means,
                scale,
                class_priors,
            } => {
                if means.len() != 2 || class_priors.len() != 2 {
                    return Err(Error::Config(
                        "gaussian mixture needs exactly two means and two class priors".into(),
                    ));
                }
                if means[0].is_empty() || means[0].len() != means[1].len() {
                    return Err(Error::Config("gaussian mixture means must share a positive dimension".into()));
                }
                if !(*scale > T::zero() && scale.is_finite()) {
                    return Err(Error::Config(format!("covariance scale must be > 0, got {scale}")));
                }
                check_probs(class_priors, "class priors")
            }
            Self::LinearRegression {
                input_std,
                weight,
                noise_std,
            } => {
                if input_std.is_empty() || input_std.len() != weight.len() {
                    return Err(Error::Config(
                        "linear regression: input_std and weight must share a positive dimension".into(),
                    ));
                }
                if input_std.iter().any(|&s| !(s > T::zero() && s.is_finite())) {
                    return Err(Error::Config("input standard deviations must be > 0".into()));
                }
                if !(*noise_std >= T::zero() && noise_std.is_finite()) {
                    return Err(Error::Config("noise_std must be >= 0".into()));
                }
                Ok(())
            }
        }
    }

    /// One draw. Assumes `validate` passed.
    pub fn draw(&self, rng: &mut SimRng) -> DataPoint<T> {
        match self {
            Self::FiniteSupport { atoms, probs } => atoms[draw_index(probs, rng)].clone(),
            Self::GaussianMixture {
                means,
                scale,
                class_priors,
            } => {
                let c = draw_index(class_priors, rng);
                let s = scale.to_f64_lossy();
                let x = means[c]
                    .iter()
                    .map(|&m| T::lit(m.to_f64_lossy() + s * standard_normal(rng)))
                    .collect();
                let y = if c == 0 { -T::one() } else { T::one() };
                DataPoint { x, y }
            }
            Self::LinearRegression {
                input_std,
                weight,
                noise_std,
            } => {
                let x: Vec<T> = input_std
                    .iter()
                    .map(|&s| T::lit(s.to_f64_lossy() * standard_normal(rng)))
                    .collect();
                let noise = T::lit(noise_std.to_f64_lossy() * standard_normal(rng));
                let y = dot(weight, &x) + noise;
                DataPoint { x, y }
            }
        }
    }

    /// Uniform finite-support population of `atoms` draws from `self`.
    pub fn materialize(&self, atoms: usize, seed: u64) -> Result<Self> {
        let sample = sample_dataset(self, atoms, seed)?;
        Ok(Self::empirical(&sample))
    }

    fn finite(&self, op: &str) -> Result<(&[DataPoint<T>], &[T])> {
        match self {
            Self::FiniteSupport { atoms, probs } => Ok((atoms, probs)),
            _ => Err(Error::Capability(format!(
                "{op} needs a finite-support distribution; materialize the parametric one first"
            ))),
        }
    }
}

/// An i.i.d. sample `S = (z_1, ..., z_n)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset<T> {
    pub points: Vec<DataPoint<T>>,
    pub n: usize,
    pub source_seed: u64,
}

impl<T: Scalar> Dataset<T> {
    pub fn from_points(points: Vec<DataPoint<T>>, source_seed: u64) -> Self {
        let n = points.len();
        Self {
            points,
            n,
            source_seed,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.points.first().map_or(0, |p| p.x.len())
    }
}

pub fn sample_dataset<T: Scalar>(dist: &DataDistribution<T>, n: usize, seed: u64) -> Result<Dataset<T>> {
    if n == 0 {
        return Err(Error::Config("sample size must be >= 1".into()));
    }
    dist.validate()?;
    let mut rng = rng_from_seed(seed);
    let points = (0..n).map(|_| dist.draw(&mut rng)).collect();
    Ok(Dataset::from_points(points, seed))
}

/// Smooth ramp that is the identity below `bound - margin`, constant `bound`
/// above `bound + margin`, and a quartic polynomial in between whose
/// derivative is `1 - smoothstep`. It is C^2 with `|phi''| <= 3 / (4 margin)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothClip<T> {
    pub bound: T,
    pub margin: T,
}

impl<T: Scalar> SmoothClip<T> {
    pub fn new(bound: T, margin: T) -> Result<Self> {
        if !(bound > T::zero() && bound.is_finite()) {
            return Err(Error::Config(format!("loss bound must be > 0, got {bound}")));
        }
        if !(margin > T::zero() && margin <= bound) {
            return Err(Error::Config(format!(
                "clip margin must lie in (0, bound], got {margin}"
            )));
        }
        Ok(Self { bound, margin })
    }

    /// Returns `(phi(r), phi'(r), phi''(r))` for `r >= 0`.
    pub fn eval(&self, r: T) -> (T, T, T) {
        let lo = self.bound - self.margin;
        let width = self.margin + self.margin;
        if r <= lo {
            return (r, T::one(), T::zero());
        }
        if r >= self.bound + self.margin {
            return (self.bound, T::zero(), T::zero());
        }
        let t = (r - lo) / width;
        let t2 = t * t;
        let half = T::lit(0.5);
        let six = T::lit(6.0);
        let v = lo + width * (t - t2 * t + half * t2 * t2);
        let d1 = T::one() - t2 * (T::lit(3.0) - t - t);
        let d2 = -(six * t - six * t2) / width;
        (v.min(self.bound), d1, d2)
    }

    pub fn curvature_bound(&self) -> T {
        T::lit(0.75) / self.margin
    }
}

/// Loss families.
#[derive(Clone, Debug, PartialEq)]
pub enum LossKind<T> {
    /// `phi(0.5 (<w, x~> - y)^2)`.
    ClippedQuadratic,
    /// `phi(log(1 + exp(-s <w, x~>)))` with `s = sign(y)` (`+1` for `y >= 0`).
    ClippedLogistic,
    /// Same value everywhere; gradient zero.
    Constant { value: T },
    /// Explicit values `values[j][i] = l(weights[j], points[i])`, looked up by
    /// exact equality. No gradient.
    Table {
        weights: Vec<Vec<T>>,
        points: Vec<DataPoint<T>>,
        values: Vec<Vec<T>>,
    },
}

/// Bound `B`, Lipschitz constant `L` and smoothness constant `M` in `w`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConstants<T> {
    pub bound: T,
    pub lipschitz: Option<T>,
    pub smoothness: Option<T>,
}

/// Loss `l(w, z)` with values in `[0, B]`.
///
/// For the clipped families an optional `input_radius` `R` projects each
/// input onto the ball of radius `R` before use (`x~ = x min(1, R/|x|)`);
/// `L` and `M` are only available when it is set.
#[derive(Clone, Debug, PartialEq)]
pub struct LossModel<T> {
    kind: LossKind<T>,
    clip: Option<SmoothClip<T>>,
    input_radius: Option<T>,
    constants: LossConstants<T>,
}

impl<T: Scalar> LossModel<T> {
    pub fn clipped_quadratic(bound: T, margin: T, input_radius: Option<T>) -> Result<Self> {
        let clip = SmoothClip::new(bound, margin)?;
        let r = check_radius(input_radius)?;
        let two = T::lit(2.0);
        let reach = bound + margin;
        let constants = LossConstants {
            bound,
            lipschitz: r.map(|r| r * (two * reach).sqrt()),
            smoothness: r.map(|r| r * r * (T::one() + clip.curvature_bound() * two * reach)),
        };
        Ok(Self {
            kind: LossKind::ClippedQuadratic,
            clip: Some(clip),
            input_radius: r,
            constants,
        })
    }

    pub fn clipped_logistic(bound: T, margin: T, input_radius: Option<T>) -> Result<Self> {
        let clip = SmoothClip::new(bound, margin)?;
        let r = check_radius(input_radius)?;
        let constants = LossConstants {
            bound,
            lipschitz: r,
            smoothness: r.map(|r| r * r * (T::lit(0.25) + clip.curvature_bound())),
        };
        Ok(Self {
            kind: LossKind::ClippedLogistic,
            clip: Some(clip),
            input_radius: r,
            constants,
        })
    }

    pub fn constant(value: T, bound: T) -> Result<Self> {
        if !(bound > T::zero() && bound.is_finite()) {
            return Err(Error::Config(format!("loss bound must be > 0, got {bound}")));
        }
        if !(value >= T::zero() && value <= bound) {
            return Err(Error::Config(format!("constant loss {value} outside [0, {bound}]")));
        }
        Ok(Self {
            kind: LossKind::Constant { value },
            clip: None,
            input_radius: None,
            constants: LossConstants {
                bound,
                lipschitz: Some(T::zero()),
                smoothness: Some(T::zero()),
            },
        })
    }

    /// `values[j][i]` is the loss of `weights[j]` on `points[i]`.
    pub fn table(
        weights: Vec<Vec<T>>,
        points: Vec<DataPoint<T>>,
        values: Vec<Vec<T>>,
        bound: T,
    ) -> Result<Self> {
        if !(bound > T::zero() && bound.is_finite()) {
            return Err(Error::Config(format!("loss bound must be > 0, got {bound}")));
        }
        if weights.is_empty() || points.is_empty() {
            return Err(Error::Config("loss table needs at least one weight and one point".into()));
        }
        if values.len() != weights.len() || values.iter().any(|row| row.len() != points.len()) {
            return Err(Error::Config("loss table shape does not match its grids".into()));
        }
        if values.iter().flatten().any(|&v| !(v >= T::zero() && v <= bound)) {
            return Err(Error::Config(format!("loss table entries must lie in [0, {bound}]")));
        }
        Ok(Self {
            kind: LossKind::Table {
                weights,
                points,
                values,
            },
            clip: None,
            input_radius: None,
            constants: LossConstants {
                bound,
                lipschitz: None,
                smoothness: None,
            },
        })
    }

    pub fn kind(&self) -> &LossKind<T> {
        &self.kind
    }

    pub fn constants(&self) -> LossConstants<T> {
        self.constants
    }

    pub fn bound(&self) -> T {
        self.constants.bound
    }

    pub fn lipschitz(&self) -> Option<T> {
        self.constants.lipschitz
    }

    pub fn smoothness(&self) -> Option<T> {
        self.constants.smoothness
    }

    pub fn clip(&self) -> Option<SmoothClip<T>> {
        self.clip
    }

    pub fn is_differentiable(&self) -> bool {
        !matches!(self.kind, LossKind::Table { .. })
    }

    /// Scale `min(1, R/|x|)` applied to the input.
    fn input_scale(&self, x: &[T]) -> T {
        match self.input_radius {
            Some(r) => {
                let nx = norm_sq(x).sqrt();
                if nx > r {
                    r / nx
                } else {
                    T::one()
                }
            }
            None => T::one(),
        }
    }

    /// Raw (unclipped) value and the scalar `c` with `grad raw = c * x`.
    fn raw(&self, w: &[T], z: &DataPoint<T>) -> (T, T) {
        let s = self.input_scale(&z.x);
        let u = dot(w, &z.x) * s;
        match self.kind {
            LossKind::ClippedQuadratic => {
                let e = u - z.y;
                (T::lit(0.5) * e * e, e * s)
            }
            LossKind::ClippedLogistic => {
                let label = if z.y >= T::zero() { T::one() } else { -T::one() };
                let m = label * u;
                // log(1 + e^{-m}) and its derivative -sigmoid(-m)
                let sp = (-m).max(T::zero()) + (-m.abs()).exp().ln_1p();
                let sig = if m >= T::zero() {
                    let e = (-m).exp();
                    e / (T::one() + e)
                } else {
                    T::one() / (T::one() + m.exp())
                };
                (sp, -label * sig * s)
            }
            _ => unreachable!("raw() is only called for parametric losses"),
        }
    }

    fn table_lookup(&self, w: &[T], z: &DataPoint<T>) -> Result<T> {
        let LossKind::Table {
            weights,
            points,
            values,
        } = &self.kind
        else {
            unreachable!()
        };
        let j = weights
            .iter()
            .position(|v| v.as_slice() == w)
            .ok_or_else(|| Error::Domain("weight vector is not on the loss table grid".into()))?;
        let i = points
            .iter()
            .position(|p| p == z)
            .ok_or_else(|| Error::Domain("data point is not on the loss table grid".into()))?;
        Ok(values[j][i])
    }

    pub fn loss(&self, w: &[T], z: &DataPoint<T>) -> Result<T> {
        match &self.kind {
            LossKind::Constant { value } => Ok(*value),
            LossKind::Table { .. } => self.table_lookup(w, z),
            _ => {
                check_dim(z.x.len(), w.len())?;
                let (r, _) = self.raw(w, z);
                let (v, _, _) = self.clip.expect("clipped family").eval(r);
                Ok(v.max(T::zero()))
            }
        }
    }

    /// Adds `scale * grad_w l(w, z)` into `acc`.
    pub fn add_grad(&self, w: &[T], z: &DataPoint<T>, scale: T, acc: &mut [T]) -> Result<()> {
        check_dim(w.len(), acc.len())?;
        match &self.kind {
            LossKind::Constant { .. } => Ok(()),
            LossKind::Table { .. } => Err(Error::Capability("table losses have no gradient".into())),
            _ => {
                check_dim(z.x.len(), w.len())?;
                let (r, c) = self.raw(w, z);
                let (_, d1, _) = self.clip.expect("clipped family").eval(r);
                let f = scale * d1 * c;
                if f != T::zero() {
                    for (a, &x) in acc.iter_mut().zip(&z.x) {
                        *a += f * x;
                    }
                }
                Ok(())
            }
        }
    }

    pub fn grad(&self, w: &[T], z: &DataPoint<T>) -> Result<Vec<T>> {
        let mut g = vec![T::zero(); w.len()];
        self.add_grad(w, z, T::one(), &mut g)?;
        Ok(g)
    }
}

fn check_radius<T: Scalar>(r: Option<T>) -> Result<Option<T>> {
    match r {
        Some(r) if !(r > T::zero() && r.is_finite()) => {
            Err(Error::Config(format!("input radius must be > 0, got {r}")))
        }
        _ => Ok(r),
    }
}

// Uniform weights take the unweighted path so that the population risk of an
// empirical distribution is bit-identical to the empirical risk.
fn mean_loss<T: Scalar>(model: &LossModel<T>, w: &[T], pts: &[DataPoint<T>]) -> Result<T> {
    if pts.is_empty() {
        return Err(Error::EmptyInput("no data points".into()));
    }
    let mut s = T::zero();
    for z in pts {
        s += model.loss(w, z)?;
    }
    Ok(s / T::from_usize_lossy(pts.len()))
}

fn mean_grad<'a, T: Scalar>(
    model: &LossModel<T>,
    w: &[T],
    pts: impl ExactSizeIterator<Item = &'a DataPoint<T>>,
) -> Result<Vec<T>> {
    let len = pts.len();
    if len == 0 {
        return Err(Error::EmptyInput("no data points".into()));
    }
    let mut g = vec![T::zero(); w.len()];
    for z in pts {
        model.add_grad(w, z, T::one(), &mut g)?;
    }
    let inv = T::from_usize_lossy(len);
    g.iter_mut().for_each(|v| *v /= inv);
    Ok(g)
}

pub fn empirical_risk<T: Scalar>(model: &LossModel<T>, w: &[T], data: &Dataset<T>) -> Result<T> {
    mean_loss(model, w, &data.points)
}

pub fn population_risk<T: Scalar>(model: &LossModel<T>, w: &[T], dist: &DataDistribution<T>) -> Result<T> {
    let (atoms, probs) = dist.finite("population risk")?;
    if is_uniform(probs) {
        return mean_loss(model, w, atoms);
    }
    let mut s = T::zero();
    for (z, &p) in atoms.iter().zip(probs) {
        if p > T::zero() {
            s += p * model.loss(w, z)?;
        }
    }
    Ok(s)
}

pub fn grad_empirical<T: Scalar>(model: &LossModel<T>, w: &[T], data: &Dataset<T>) -> Result<Vec<T>> {
    mean_grad(model, w, data.points.iter())
}

/// Mean gradient over the points at `indices` (repeats count).
pub fn grad_minibatch<T: Scalar>(
    model: &LossModel<T>,
    w: &[T],
    data: &Dataset<T>,
    indices: &[usize],
) -> Result<Vec<T>> {
    mean_grad(model, w, indices.iter().map(|&i| &data.points[i]))
}

pub fn grad_population<T: Scalar>(
    model: &LossModel<T>,
    w: &[T],
    dist: &DataDistribution<T>,
) -> Result<Vec<T>> {
    let (atoms, probs) = dist.finite("population gradient")?;
    if is_uniform(probs) {
        return mean_grad(model, w, atoms.iter());
    }
    let mut g = vec![T::zero(); w.len()];
    for (z, &p) in atoms.iter().zip(probs) {
        if p > T::zero() {
            model.add_grad(w, z, p, &mut g)?;
        }
    }
    Ok(g)
}

/// Worst-case gaps of a finite hypothesis set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapSummary<T> {
    /// `max_w R(w) - R_S(w)`.
    pub sup_gap: T,
    pub argmax: usize,
    /// `max_w |R(w) - R_S(w)|`.
    pub sup_abs_gap: T,
    pub argmax_abs: usize,
    /// Per-hypothesis signed gaps, in input order.
    pub gaps: Vec<T>,
}

pub fn gen_gap_sup<T: Scalar>(
    model: &LossModel<T>,
    data: &Dataset<T>,
    dist: &DataDistribution<T>,
    set: &[Vec<T>],
) -> Result<GapSummary<T>> {
    if set.is_empty() {
        return Err(Error::Domain("hypothesis set is empty".into()));
    }
    let gaps = set
        .iter()
        .map(|w| Ok(population_risk(model, w, dist)? - empirical_risk(model, w, data)?))
        .collect::<Result<Vec<T>>>()?;
    let (mut argmax, mut argmax_abs) = (0, 0);
    for (j, &g) in gaps.iter().enumerate() {
        if g > gaps[argmax] {
            argmax = j;
        }
        if g.abs() > gaps[argmax_abs].abs() {
            argmax_abs = j;
        }
    }
    Ok(GapSummary {
        sup_gap: gaps[argmax],
        argmax,
        sup_abs_gap: gaps[argmax_abs].abs(),
        argmax_abs,
        gaps,
    })
}
