//! Rademacher complexity, covering numbers and box-counting dimension.

use std::io::Write;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{Dataset, LossModel};
use crate::rng::{fill_signs, rng_from_seed};
use crate::scalar::{dist_sq, mean_and_se, Scalar};

/// `n x K` table with entry `(i, j) = l(w_j, z_i)`, stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossMatrix<T> {
    n: usize,
    k: usize,
    values: Vec<T>,
    bound: T,
}

impl<T: Scalar> LossMatrix<T> {
    /// Builds from rows (one per data point).
    pub fn from_rows(rows: &[Vec<T>], bound: T) -> Result<Self> {
        let n = rows.len();
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Config("loss matrix rows have differing lengths".into()));
        }
        let values: Vec<T> = rows.iter().flatten().copied().collect();
        Self::from_row_major(n, k, values, bound)
    }

    pub fn from_row_major(n: usize, k: usize, values: Vec<T>, bound: T) -> Result<Self> {
        if values.len() != n * k {
            return Err(Error::Config(format!("expected {} entries, got {}", n * k, values.len())));
        }
        if !(bound > T::zero()) {
            return Err(Error::Config(format!("loss bound must be > 0, got {bound}")));
        }
        if values.iter().any(|&v| !(v >= T::zero() && v <= bound)) {
            return Err(Error::Config(format!("loss matrix entries must lie in [0, {bound}]")));
        }
        Ok(Self { n, k, values, bound })
    }

    /// Tabulates `model` on `data` for each hypothesis in `set`.
    pub fn from_model(model: &LossModel<T>, data: &Dataset<T>, set: &[Vec<T>]) -> Result<Self> {
        let (n, k) = (data.len(), set.len());
        let mut values = Vec::with_capacity(n * k);
        for z in &data.points {
            for w in set {
                values.push(model.loss(w, z)?);
            }
        }
        Self::from_row_major(n, k, values, model.bound())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn bound(&self) -> T {
        self.bound
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[i * self.k + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.values[i * self.k..(i + 1) * self.k]
    }

    fn check_nonempty(&self) -> Result<()> {
        if self.n == 0 || self.k == 0 {
            Err(Error::Domain("loss matrix is empty".into()))
        } else {
            Ok(())
        }
    }

    /// `max_j sum_i s_i l(w_j, z_i)` for signs `s`, using `acc` as scratch.
    fn sup_signed_sum(&self, signs: &[i8], acc: &mut [T]) -> T {
        acc.iter_mut().for_each(|a| *a = T::zero());
        for (i, &s) in signs.iter().enumerate() {
            let row = self.row(i);
            if s > 0 {
                acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
            } else {
                acc.iter_mut().zip(row).for_each(|(a, &v)| *a -= v);
            }
        }
        acc.iter().copied().fold(T::neg_infinity(), T::max)
    }
}

/// Monte-Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate<T> {
    pub mean: T,
    pub std_error: T,
    pub draws: usize,
    pub seed: u64,
}

pub type RademacherEstimate<T> = McEstimate<T>;

fn mc_over_signs<T: Scalar>(
    lm: &LossMatrix<T>,
    draws: usize,
    seed: u64,
    mut f: impl FnMut(T) -> T,
) -> Result<McEstimate<T>> {
    lm.check_nonempty()?;
    if draws == 0 {
        return Err(Error::Domain("need at least one sign draw".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut signs = vec![0i8; lm.n];
    let mut acc = vec![T::zero(); lm.k];
    let mut samples = Vec::with_capacity(draws);
    for _ in 0..draws {
        fill_signs(&mut rng, &mut signs);
        samples.push(f(lm.sup_signed_sum(&signs, &mut acc)));
    }
    let (mean, std_error) = mean_and_se(&samples);
    Ok(McEstimate {
        mean,
        std_error,
        draws,
        seed,
    })
}

/// Monte-Carlo empirical Rademacher complexity
/// `E_eps (1/n) max_j sum_i eps_i l(w_j, z_i)`.
pub fn rademacher_mc<T: Scalar>(lm: &LossMatrix<T>, draws: usize, seed: u64) -> Result<RademacherEstimate<T>> {
    let n = T::from_usize_lossy(lm.n);
    mc_over_signs(lm, draws, seed, |s| s / n)
}

/// Default cap on `lambda * B` for the MGF estimator.
pub const MGF_LAMBDA_B_CAP: f64 = 30.0;

/// Monte-Carlo Rademacher MGF `E_eps exp((lambda/n) max_j sum_i eps_i l_ij)`.
pub fn rademacher_mgf_mc<T: Scalar>(lm: &LossMatrix<T>, lambda: T, draws: usize, seed: u64) -> Result<McEstimate<T>> {
    rademacher_mgf_mc_capped(lm, lambda, draws, seed, T::lit(MGF_LAMBDA_B_CAP))
}

pub fn rademacher_mgf_mc_capped<T: Scalar>(
    lm: &LossMatrix<T>,
    lambda: T,
    draws: usize,
    seed: u64,
    cap: T,
) -> Result<McEstimate<T>> {
    if !(lambda > T::zero()) {
        return Err(Error::Domain(format!("lambda must be > 0, got {lambda}")));
    }
    if lambda * lm.bound > cap {
        return Err(Error::Range(format!(
            "lambda * B = {} exceeds the cap {cap}; reduce lambda",
            lambda * lm.bound
        )));
    }
    let scale = lambda / T::from_usize_lossy(lm.n);
    let est = mc_over_signs(lm, draws, seed, |s| (scale * s).exp())?;
    if !est.mean.is_finite() || !est.std_error.is_finite() {
        return Err(Error::Range("MGF estimate overflowed; reduce lambda".into()));
    }
    Ok(est)
}

/// Massart's finite-class bound `B sqrt(2 ln K / n)`.
pub fn massart_bound<T: Scalar>(k: usize, bound: T, n: usize) -> T {
    let k = T::from_usize_lossy(k.max(1));
    bound * (T::lit(2.0) * k.ln() / T::from_usize_lossy(n)).sqrt()
}

/// Symmetric `K x K` distance table, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix<T> {
    size: usize,
    values: Vec<T>,
}

impl<T: Scalar> DistanceMatrix<T> {
    pub fn new(size: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != size * size {
            return Err(Error::Config(format!(
                "distance matrix needs {} entries, got {}",
                size * size,
                values.len()
            )));
        }
        Ok(Self { size, values })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> T {
        self.values[a * self.size + b]
    }
}

/// Data-dependent pseudometric `(1/n) sum_i |l_ij - l_ij'|` between columns.
pub fn pseudometric_matrix<T: Scalar>(lm: &LossMatrix<T>) -> DistanceMatrix<T> {
    let k = lm.k;
    let n = T::from_usize_lossy(lm.n.max(1));
    let mut values = vec![T::zero(); k * k];
    for a in 0..k {
        for b in a + 1..k {
            let s: T = (0..lm.n).map(|i| (lm.get(i, a) - lm.get(i, b)).abs()).sum();
            let v = s / n;
            values[a * k + b] = v;
            values[b * k + a] = v;
        }
    }
    DistanceMatrix { size: k, values }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Euclidean,
    DataDependent,
}

/// A finite metric space: points under the Euclidean distance, or an
/// explicit distance table.
#[derive(Clone, Copy, Debug)]
pub enum Geometry<'a, T> {
    Points(&'a [Vec<T>]),
    Matrix(&'a DistanceMatrix<T>),
}

impl<T: Scalar> Geometry<'_, T> {
    pub fn len(&self) -> usize {
        match self {
            Geometry::Points(p) => p.len(),
            Geometry::Matrix(m) => m.size,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn metric(&self) -> Metric {
        match self {
            Geometry::Points(_) => Metric::Euclidean,
            Geometry::Matrix(_) => Metric::DataDependent,
        }
    }

    pub fn dist(&self, a: usize, b: usize) -> T {
        match self {
            Geometry::Points(p) => dist_sq(&p[a], &p[b]).sqrt(),
            Geometry::Matrix(m) => m.get(a, b),
        }
    }
}

/// Farthest-point traversal from index 0 (ties go to the lowest index).
/// `radii[i]` is the distance from `order[i]` to the earlier centers when it
/// was picked; `radii[0]` is infinite. Radii are nonincreasing.
#[derive(Clone, Debug, PartialEq)]
pub struct FarthestPointOrder<T> {
    pub order: Vec<usize>,
    pub radii: Vec<T>,
}

impl<T: Scalar> FarthestPointOrder<T> {
    pub fn compute(geom: &Geometry<'_, T>) -> Result<Self> {
        let len = geom.len();
        if len == 0 {
            return Err(Error::EmptyInput("point set is empty".into()));
        }
        let mut order = Vec::with_capacity(len);
        let mut radii = Vec::with_capacity(len);
        let mut nearest = vec![T::infinity(); len];
        let mut taken = vec![false; len];
        let mut cur = 0;
        let mut r = T::infinity();
        loop {
            order.push(cur);
            radii.push(r);
            taken[cur] = true;
            if order.len() == len {
                break;
            }
            let mut best = usize::MAX;
            let mut best_d = T::neg_infinity();
            for (i, near) in nearest.iter_mut().enumerate() {
                if taken[i] {
                    continue;
                }
                let d = geom.dist(cur, i);
                if d < *near {
                    *near = d;
                }
                if *near > best_d {
                    best_d = *near;
                    best = i;
                }
            }
            cur = best;
            r = best_d;
        }
        Ok(Self { order, radii })
    }

    /// Number of greedy centers needed at scale `delta`.
    pub fn cover_size(&self, delta: T) -> usize {
        self.radii.iter().take_while(|&&r| r > delta).count().max(1)
    }

    /// Size of the greedy `2 delta`-separated prefix, a lower bound on the
    /// minimal `delta`-cover.
    pub fn packing_size(&self, delta: T) -> usize {
        self.cover_size(delta + delta)
    }
}

/// Result of one greedy cover.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cover {
    /// Center indices into the point set; every point is within `delta` of one.
    pub centers: Vec<usize>,
    /// Number of pairwise `> 2 delta` separated points found (lower bound on
    /// any `delta`-cover).
    pub packing: usize,
}

pub fn greedy_cover<T: Scalar>(geom: &Geometry<'_, T>, delta: T) -> Result<Cover> {
    if !(delta > T::zero()) {
        return Err(Error::Domain(format!("scale must be > 0, got {delta}")));
    }
    let fpo = FarthestPointOrder::compute(geom)?;
    let c = fpo.cover_size(delta);
    Ok(Cover {
        centers: fpo.order[..c].to_vec(),
        packing: fpo.packing_size(delta),
    })
}

/// Cover and packing sizes over a decreasing list of scales.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoveringCurve<T> {
    pub scales: Vec<T>,
    pub cover_sizes: Vec<usize>,
    pub pack_sizes: Vec<usize>,
    pub metric: Metric,
}

pub fn covering_curve<T: Scalar>(geom: &Geometry<'_, T>, scales: &[T]) -> Result<CoveringCurve<T>> {
    if scales.is_empty() {
        return Err(Error::Domain("no scales given".into()));
    }
    if scales.iter().any(|&s| !(s > T::zero())) || scales.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Domain("scales must be positive and strictly decreasing".into()));
    }
    let fpo = FarthestPointOrder::compute(geom)?;
    let cover_sizes: Vec<usize> = scales.iter().map(|&s| fpo.cover_size(s)).collect();
    let pack_sizes: Vec<usize> = scales.iter().map(|&s| fpo.packing_size(s)).collect();
    debug_assert!(cover_sizes.windows(2).all(|w| w[0] <= w[1]));
    debug_assert!(pack_sizes.iter().zip(&cover_sizes).all(|(p, c)| p <= c));
    Ok(CoveringCurve {
        scales: scales.to_vec(),
        cover_sizes,
        pack_sizes,
        metric: geom.metric(),
    })
}

impl<T: Scalar> CoveringCurve<T> {
    /// `(log(1/delta), log N_delta)` pairs.
    pub fn log_points(&self) -> Vec<(T, T)> {
        self.scales
            .iter()
            .zip(&self.cover_sizes)
            .map(|(&s, &c)| (-s.ln(), T::from_usize_lossy(c).ln()))
            .collect()
    }

    /// Writes `scale,cover,pack` rows with a header.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["scale", "cover", "pack"]).map_err(csv_err)?;
        for ((s, c), p) in self.scales.iter().zip(&self.cover_sizes).zip(&self.pack_sizes) {
            w.write_record([s.to_string(), c.to_string(), p.to_string()])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimensionFit<T> {
    /// Least-squares slope of `log N` against `log(1/delta)`.
    pub dimension: T,
    pub intercept: T,
    /// Root-mean-square residual of the fit.
    pub residual: T,
    pub window: Range<usize>,
}

/// Middle half of `len` scales.
pub fn default_window(len: usize) -> Range<usize> {
    len / 4..len - len / 4
}

/// Box-counting dimension estimate over `window` (default: the middle half
/// of the scales).
pub fn fit_box_dimension<T: Scalar>(curve: &CoveringCurve<T>, window: Option<Range<usize>>) -> Result<DimensionFit<T>> {
    let len = curve.scales.len();
    let window = window.unwrap_or_else(|| default_window(len));
    if window.end > len || window.start >= window.end || window.len() < 3 {
        return Err(Error::Domain(format!(
            "dimension fit needs a window of at least 3 scales within 0..{len}, got {window:?}"
        )));
    }
    let pts = &curve.log_points()[window.clone()];
    let m = T::from_usize_lossy(pts.len());
    let mx = pts.iter().map(|p| p.0).sum::<T>() / m;
    let my = pts.iter().map(|p| p.1).sum::<T>() / m;
    let sxx: T = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: T = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if !(sxx > T::zero()) {
        return Err(Error::Degenerate("all scales in the window coincide".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss: T = pts
        .iter()
        .map(|p| {
            let r = p.1 - (intercept + slope * p.0);
            r * r
        })
        .sum();
    Ok(DimensionFit {
        dimension: slope,
        intercept,
        residual: (ss / m).sqrt(),
        window,
    })
}

/// Rademacher bound for continuous Langevin sets:
/// `1/sqrt(n) + max(1, B) sqrt(2 ln(2 T n L^2 (1 + C^2 d^2 sigma^2)) / n)`,
/// with `C` the unspecified universal constant (default 1).
pub fn rademacher_cld_bound<T: Scalar>(
    bound: T,
    lipschitz: T,
    sigma: T,
    d: usize,
    time: T,
    n: usize,
    c: T,
) -> Result<T> {
    let nf = T::from_usize_lossy(n);
    let df = T::from_usize_lossy(d);
    let two = T::lit(2.0);
    let arg = two * time * nf * lipschitz * lipschitz * (T::one() + c * c * df * df * sigma * sigma);
    if !(arg > T::one()) {
        return Err(Error::Domain(format!("log argument {arg} must exceed 1")));
    }
    Ok(nf.sqrt().recip() + bound.max(T::one()) * (two * arg.ln() / nf).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_line_cover() {
        let pts = vec![vec![0.0], vec![1.0]];
        let g = Geometry::Points(&pts);
        assert_eq!(greedy_cover(&g, 1.0).unwrap().centers, vec![0]);
        assert_eq!(greedy_cover(&g, 0.4).unwrap().centers.len(), 2);
    }

    #[test]
    fn mgf_cap() {
        let lm = LossMatrix::from_rows(&[vec![1.0]], 1.0).unwrap();
        assert!(matches!(rademacher_mgf_mc(&lm, 31.0, 10, 0), Err(Error::Range(_))));
    }

    #[test]
    fn window_too_small() {
        let c = CoveringCurve::<f64> {
            scales: vec![1.0, 0.5, 0.25, 0.125],
            cover_sizes: vec![1, 2, 4, 8],
            pack_sizes: vec![1, 1, 2, 4],
            metric: Metric::Euclidean,
        };
        // the middle half of 4 scales is only 2 wide
        assert!(matches!(fit_box_dimension(&c, None), Err(Error::Domain(_))));
        let f = fit_box_dimension(&c, Some(0..4)).unwrap();
        assert!((f.dimension - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cld_bound_domain() {
        assert!(rademacher_cld_bound(1.0, 0.0, 1.0, 1, 1.0, 100, 1.0).is_err());
    }
}
