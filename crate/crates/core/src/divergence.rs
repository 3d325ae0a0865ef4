//! Exact and empirical divergences between one-dimensional piecewise-uniform
//! distributions: threshold-classifier H-divergence, Wasserstein-1 through
//! quantile functions, and exact optimal transport on small point clouds.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::min_cost_assignment;
use crate::error::{Error, Result};

/// Uniform density over a union of disjoint intervals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseUniform {
    intervals: Vec<(f64, f64)>,
}

impl PiecewiseUniform {
    /// Sorts and validates `intervals`; touching intervals are merged.
    pub fn new(mut intervals: Vec<(f64, f64)>) -> Result<Self> {
        if intervals.is_empty() {
            return Err(Error::Domain("a distribution needs at least one interval".into()));
        }
        for &(lo, hi) in &intervals {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Domain(format!("invalid interval [{lo}, {hi}]")));
            }
        }
        intervals.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(intervals.len());
        for (lo, hi) in intervals {
            match merged.last_mut() {
                Some(last) if lo < last.1 => {
                    return Err(Error::Domain(format!(
                        "intervals [{}, {}] and [{lo}, {hi}] overlap",
                        last.0, last.1
                    )))
                }
                Some(last) if lo == last.1 => last.1 = hi,
                _ => merged.push((lo, hi)),
            }
        }
        Ok(Self { intervals: merged })
    }

    pub fn uniform(lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![(lo, hi)])
    }

    pub fn intervals(&self) -> &[(f64, f64)] {
        &self.intervals
    }

    /// Total support length.
    pub fn length(&self) -> f64 {
        self.intervals.iter().map(|(lo, hi)| hi - lo).sum()
    }

    pub fn density(&self) -> f64 {
        1.0 / self.length()
    }

    /// Support length inside `(-inf, p)`.
    fn length_below(&self, p: f64) -> f64 {
        self.intervals
            .iter()
            .map(|&(lo, hi)| (p.min(hi) - lo).max(0.0))
            .sum()
    }

    /// Cumulative mass at the right end of every interval.
    fn breakpoints(&self) -> Vec<f64> {
        let total = self.length();
        let mut acc = 0.0;
        self.intervals
            .iter()
            .map(|(lo, hi)| {
                acc += hi - lo;
                acc / total
            })
            .collect()
    }

    /// Inverse CDF restricted to interval `k`, evaluated at mass `z`.
    fn quantile_in(&self, k: usize, z: f64) -> f64 {
        let total = self.length();
        let before: f64 = self.intervals[..k].iter().map(|(lo, hi)| hi - lo).sum();
        self.intervals[k].0 + (z * total - before)
    }

    /// Index of the interval whose quantile branch covers mass `z`; on a
    /// plateau this is the lower interval.
    fn branch(&self, z: f64) -> usize {
        let bps = self.breakpoints();
        bps.iter().position(|&b| z <= b).unwrap_or(bps.len() - 1)
    }

    fn quantile_unchecked(&self, z: f64) -> f64 {
        let k = self.branch(z);
        self.quantile_in(k, z).clamp(self.intervals[k].0, self.intervals[k].1)
    }
}

/// `U([−2a, −a] ∪ [a, 2a])`
pub fn make_d1(a: f64) -> Result<PiecewiseUniform> {
    if !(a > 0.0) {
        return Err(Error::Domain(format!("need a > 0, got {a}")));
    }
    PiecewiseUniform::new(vec![(-2.0 * a, -a), (a, 2.0 * a)])
}

fn check_ab(a: f64, b: f64) -> Result<()> {
    if !(a > b && b > 0.0) {
        return Err(Error::Domain(format!("need a > b > 0, got a = {a}, b = {b}")));
    }
    Ok(())
}

/// `U([−x0 − b/2, −x0 + b/2] ∪ [x0 − b/2, x0 + b/2])`, supported inside `make_d1(a)`.
pub fn make_d2(a: f64, b: f64, x0: f64) -> Result<PiecewiseUniform> {
    check_ab(a, b)?;
    let (lo, hi) = (a + b / 2.0, 2.0 * a - b / 2.0);
    if !(lo <= x0 && x0 <= hi) {
        return Err(Error::Domain(format!(
            "x0 = {x0} violates support containment in D1: need {lo} <= x0 <= {hi}"
        )));
    }
    PiecewiseUniform::new(vec![(-x0 - b / 2.0, -x0 + b / 2.0), (x0 - b / 2.0, x0 + b / 2.0)])
}

/// `U([x0 − b, x0 + b])`, supported inside `make_d1(a)`.
pub fn make_d3(a: f64, b: f64, x0: f64) -> Result<PiecewiseUniform> {
    check_ab(a, b)?;
    let (lo, hi) = (a + b, 2.0 * a - b);
    if !(lo <= x0 && x0 <= hi) {
        return Err(Error::Domain(format!(
            "x0 = {x0} violates support containment in D1: need {lo} <= x0 <= {hi}"
        )));
    }
    PiecewiseUniform::uniform(x0 - b, x0 + b)
}

/// Inverse CDF at `z`. At a plateau (a gap between intervals) the left
/// endpoint of the jump is returned.
pub fn quantile(p: &PiecewiseUniform, z: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&z) {
        return Err(Error::Domain(format!("quantile level {z} outside [0, 1]")));
    }
    Ok(p.quantile_unchecked(z))
}

/// Exact `∫₀¹ |F⁻¹(z) − G⁻¹(z)| dz`.
///
/// Both inverse CDFs are linear between the merged mass breakpoints, so the
/// integrand is integrated segment by segment, splitting at sign changes.
pub fn w1_quantile(p: &PiecewiseUniform, q: &PiecewiseUniform) -> f64 {
    let mut cuts: Vec<f64> = std::iter::once(0.0)
        .chain(p.breakpoints())
        .chain(q.breakpoints())
        .collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    if let Some(last) = cuts.last_mut() {
        *last = 1.0;
    }

    let mut total = 0.0;
    for seg in cuts.windows(2) {
        let (z0, z1) = (seg[0], seg[1]);
        if z1 <= z0 {
            continue;
        }
        let mid = 0.5 * (z0 + z1);
        let (kp, kq) = (p.branch(mid), q.branch(mid));
        let f0 = p.quantile_in(kp, z0) - q.quantile_in(kq, z0);
        let f1 = p.quantile_in(kp, z1) - q.quantile_in(kq, z1);
        total += abs_linear_integral(f0, f1, z1 - z0);
    }
    total
}

/// `∫ |f|` over a segment of width `w` where `f` is linear from `f0` to `f1`.
fn abs_linear_integral(f0: f64, f1: f64, w: f64) -> f64 {
    if f0 * f1 >= 0.0 {
        0.5 * (f0.abs() + f1.abs()) * w
    } else {
        let t = f0.abs() / (f0.abs() + f1.abs());
        0.5 * f0.abs() * t * w + 0.5 * f1.abs() * (1.0 - t) * w
    }
}

/// How misclassification is weighted in [`threshold_risk`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskConvention {
    /// Misclassified support length of both distributions over their total
    /// support length.
    #[default]
    SupportArea,
    /// Average of the two misclassified probability masses.
    DensityWeighted,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRisk {
    pub eps_star: f64,
    pub p_star: f64,
    /// `+1`: points `x >= p` are attributed to `Q`; `−1`: to `P`.
    pub orientation: i8,
}

/// Best threshold classifier `1{x >= p}` separating `P` from `Q`.
pub fn threshold_risk(p: &PiecewiseUniform, q: &PiecewiseUniform) -> ThresholdRisk {
    threshold_risk_with(p, q, RiskConvention::SupportArea)
}

pub fn threshold_risk_with(p: &PiecewiseUniform, q: &PiecewiseUniform, convention: RiskConvention) -> ThresholdRisk {
    // The risk is piecewise linear in the threshold between support endpoints,
    // so its minimum over the real line is attained at one of them.
    let mut candidates: Vec<f64> = p
        .intervals()
        .iter()
        .chain(q.intervals())
        .flat_map(|&(lo, hi)| [lo, hi])
        .collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    let (lp, lq) = (p.length(), q.length());
    let risk = |p_wrong: f64, q_wrong: f64| match convention {
        RiskConvention::SupportArea => (p_wrong + q_wrong) / (lp + lq),
        RiskConvention::DensityWeighted => 0.5 * (p_wrong / lp + q_wrong / lq),
    };

    let mut best = ThresholdRisk {
        eps_star: f64::INFINITY,
        p_star: f64::NAN,
        orientation: 1,
    };
    for &t in &candidates {
        let (p_below, q_below) = (p.length_below(t), q.length_below(t));
        let options = [
            // x >= t is called Q: P above and Q below are wrong
            (1i8, risk(lp - p_below, q_below)),
            (-1i8, risk(p_below, lq - q_below)),
        ];
        for (orientation, r) in options {
            if r < best.eps_star {
                best = ThresholdRisk {
                    eps_star: r,
                    p_star: t,
                    orientation,
                };
            }
        }
    }
    best
}

/// `1 − 2ε*` for the threshold family.
pub fn h_divergence(p: &PiecewiseUniform, q: &PiecewiseUniform) -> f64 {
    1.0 - 2.0 * threshold_risk(p, q).eps_star
}

/// `(1/n) Σ |sort(xs)ᵢ − sort(ys)ᵢ|`
pub fn w1_empirical_sorted(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(Error::Precondition(format!(
            "need two nonempty samples of equal size, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let mut a = xs.to_vec();
    let mut b = ys.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Uniformly weighted point set.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Array2<f64>,
}

impl PointCloud {
    pub fn new(points: Array2<f64>) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(Error::Precondition("a point cloud needs at least one point".into()));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point cloud entries must be finite".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }
}

pub const EXACT_OT_MAX_POINTS: usize = 64;

/// Pairwise ℓ₂ cost matrix between two clouds.
pub fn cost_matrix(x: &PointCloud, y: &PointCloud) -> Array2<f64> {
    Array2::from_shape_fn((x.len(), y.len()), |(i, j)| {
        (&x.points.row(i) - &y.points.row(j)).mapv(|v| v * v).sum().sqrt()
    })
}

/// Exact W₁ between equal-size uniform clouds with ℓ₂ ground cost, solved as
/// an assignment problem.
pub fn w1_exact_small(x: &PointCloud, y: &PointCloud) -> Result<f64> {
    if x.len() != y.len() || x.dim() != y.dim() {
        return Err(Error::Precondition(format!(
            "clouds must match in size and dimension, got {}x{} and {}x{}",
            x.len(),
            x.dim(),
            y.len(),
            y.dim()
        )));
    }
    if x.len() > EXACT_OT_MAX_POINTS {
        return Err(Error::Size(format!(
            "exact transport is limited to {EXACT_OT_MAX_POINTS} points, got {}",
            x.len()
        )));
    }
    let cost = cost_matrix(x, y);
    let assignment = min_cost_assignment(&cost);
    let total: f64 = assignment.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
    Ok(total / x.len() as f64)
}

/// Monte-Carlo W₁: `n` seeded inverse-CDF draws from each, then
/// [`w1_empirical_sorted`]. Draw `i` uses a uniform from `[i/n, (i+1)/n)`;
/// with plain i.i.d. uniforms the two samples' shares of each component
/// differ by ~1/√n, and on supports split by a wide gap that imbalance alone
/// moves the estimate by far more than the integrator's error.
pub fn mc_w1_estimate(p: &PiecewiseUniform, q: &PiecewiseUniform, n: usize, seed: u64) -> Result<f64> {
    if n == 0 {
        return Err(Error::Precondition("need at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |law: &PiecewiseUniform| -> Vec<f64> {
        (0..n)
            .map(|i| law.quantile_unchecked((i as f64 + rng.gen::<f64>()) / n as f64))
            .collect()
    };
    let xs = draw(p);
    let ys = draw(q);
    w1_empirical_sorted(&xs, &ys)
}

/// The diversity comparison between `D1` and the two query families over
/// evenly spaced admissible `x0` grids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub a: f64,
    pub b: f64,
    pub x0_grid: X0Grid,
    pub w1_d2: Vec<f64>,
    pub w1_d3: Vec<f64>,
    pub eps_star_d2: f64,
    pub eps_star_d3: f64,
    pub h_divergence_d2: f64,
    pub h_divergence_d3: f64,
    pub ordering_holds: bool,
}

/// The two families have different admissible `x0` ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct X0Grid {
    pub d2: Vec<f64>,
    pub d3: Vec<f64>,
}

/// `n` evenly spaced points on `[lo, hi]` (a single point when `lo == hi`).
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n)
            .map(|i| if i + 1 == n { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
            .collect(),
    }
}

/// Evaluates W₁ and ε* for both families on `grid`-point `x0` grids.
/// Requires `a >= 2b` so that the `D3` family is admissible.
pub fn divergence_report(a: f64, b: f64, grid: usize) -> Result<DivergenceReport> {
    check_ab(a, b)?;
    if grid == 0 {
        return Err(Error::Domain("grid needs at least one point".into()));
    }
    if a + b > 2.0 * a - b {
        return Err(Error::Domain(format!(
            "D3 family is empty: need a >= 2b, got a = {a}, b = {b}"
        )));
    }
    let d1 = make_d1(a)?;
    let grid_d2 = linspace(a + b / 2.0, 2.0 * a - b / 2.0, grid);
    let grid_d3 = linspace(a + b, 2.0 * a - b, grid);

    let mut w1_d2 = Vec::with_capacity(grid);
    let mut eps_d2: f64 = 0.0;
    for &x0 in &grid_d2 {
        let d2 = make_d2(a, b, x0)?;
        w1_d2.push(w1_quantile(&d1, &d2));
        eps_d2 = eps_d2.max(threshold_risk(&d1, &d2).eps_star);
    }
    let mut w1_d3 = Vec::with_capacity(grid);
    let mut eps_d3: f64 = 0.0;
    for &x0 in &grid_d3 {
        let d3 = make_d3(a, b, x0)?;
        w1_d3.push(w1_quantile(&d1, &d3));
        eps_d3 = eps_d3.max(threshold_risk(&d1, &d3).eps_star);
    }
    let min_d3 = w1_d3.iter().copied().fold(f64::INFINITY, f64::min);
    let max_d2 = w1_d2.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(DivergenceReport {
        a,
        b,
        x0_grid: X0Grid { d2: grid_d2, d3: grid_d3 },
        w1_d2,
        w1_d3,
        eps_star_d2: eps_d2,
        eps_star_d3: eps_d3,
        h_divergence_d2: 1.0 - 2.0 * eps_d2,
        h_divergence_d3: 1.0 - 2.0 * eps_d3,
        ordering_holds: min_d3 > max_d2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn u(lo: f64, hi: f64) -> PiecewiseUniform {
        PiecewiseUniform::uniform(lo, hi).unwrap()
    }

    #[test]
    fn family_constructors() {
        let d1 = make_d1(2.0).unwrap();
        assert_eq!(d1.intervals(), &[(-4.0, -2.0), (2.0, 4.0)]);
        assert_eq!(d1.length(), 4.0);
        assert_eq!(make_d3(2.0, 1.0, 3.0).unwrap().intervals(), &[(2.0, 4.0)]);
        let err = make_d3(2.0, 1.0, 5.0).unwrap_err();
        assert!(matches!(err, Error::Domain(ref m) if m.contains("containment")));
        assert!(make_d2(2.0, 1.0, 2.4).is_err());
        assert!(make_d2(1.0, 2.0, 2.0).is_err());
    }

    #[test]
    fn rejects_overlap_and_merges_touching() {
        assert!(PiecewiseUniform::new(vec![(0.0, 2.0), (1.0, 3.0)]).is_err());
        let p = PiecewiseUniform::new(vec![(1.0, 2.0), (0.0, 1.0)]).unwrap();
        assert_eq!(p.intervals(), &[(0.0, 2.0)]);
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(quantile(&u(0.0, 1.0), 0.25).unwrap(), 0.25);
        let d1 = make_d1(2.0).unwrap();
        assert!((quantile(&d1, 0.25).unwrap() + 3.0).abs() < 1e-12);
        assert_eq!(quantile(&d1, 0.0).unwrap(), -4.0);
        // plateau resolves to the left endpoint of the jump
        assert_eq!(quantile(&d1, 0.5).unwrap(), -2.0);
        assert_eq!(quantile(&d1, 1.0).unwrap(), 4.0);
        assert!(matches!(quantile(&d1, 1.5), Err(Error::Domain(_))));
    }

    #[test]
    fn w1_examples() {
        let d1 = make_d1(2.0).unwrap();
        assert_eq!(w1_quantile(&d1, &d1), 0.0);
        for c in [-2.5, 0.0, 0.7, 3.0] {
            assert!((w1_quantile(&u(0.0, 1.0), &u(c, c + 1.0)) - c.abs()).abs() < 1e-12);
        }
        let d3 = make_d3(2.0, 1.0, 3.0).unwrap();
        assert!((w1_quantile(&d1, &d3) - 3.0).abs() < 1e-12);
        let mc = mc_w1_estimate(&d1, &d3, 20_000, 1).unwrap();
        assert!((mc - 3.0).abs() < 0.02);
    }

    #[test]
    fn threshold_examples() {
        let d1 = make_d1(2.0).unwrap();
        let r3 = threshold_risk(&d1, &make_d3(2.0, 1.0, 3.0).unwrap());
        assert!((r3.eps_star - 1.0 / 3.0).abs() < 1e-12);
        let r2 = threshold_risk(&d1, &make_d2(2.0, 1.0, 3.0).unwrap());
        assert!((r2.eps_star - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(threshold_risk(&u(0.0, 1.0), &u(2.0, 3.0)).eps_star, 0.0);
        assert_eq!(h_divergence(&u(0.0, 1.0), &u(2.0, 3.0)), 1.0);
        let same = threshold_risk(&d1, &d1);
        assert_eq!(same.eps_star, 0.5);
        assert_eq!(h_divergence(&d1, &d1), 0.0);
    }

    #[test]
    fn density_weighted_convention_differs() {
        let p = u(0.0, 1.0);
        let q = PiecewiseUniform::new(vec![(0.5, 1.0), (2.0, 4.0)]).unwrap();
        let area = threshold_risk_with(&p, &q, RiskConvention::SupportArea);
        let dens = threshold_risk_with(&p, &q, RiskConvention::DensityWeighted);
        assert!((area.eps_star - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(area.p_star, 0.5);
        assert!((dens.eps_star - 0.1).abs() < 1e-12);
        assert_eq!(dens.p_star, 1.0);
    }

    #[test]
    fn empirical_examples() {
        assert_eq!(w1_empirical_sorted(&[1.0, 2.0], &[2.0, 1.0]).unwrap(), 0.0);
        assert_eq!(w1_empirical_sorted(&[0.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(w1_empirical_sorted(&[0.0, 2.0], &[1.0, 3.0]).unwrap(), 1.0);
        assert!(w1_empirical_sorted(&[0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn exact_ot_errors() {
        let a = PointCloud::new(array![[0.0], [1.0]]).unwrap();
        let b = PointCloud::new(array![[0.0]]).unwrap();
        assert!(matches!(w1_exact_small(&a, &b), Err(Error::Precondition(_))));
        let big = PointCloud::new(Array2::zeros((65, 1))).unwrap();
        assert!(matches!(w1_exact_small(&big, &big), Err(Error::Size(_))));
        assert_eq!(w1_exact_small(&a, &a).unwrap(), 0.0);
        assert!(PointCloud::new(Array2::zeros((0, 2))).is_err());
    }

    #[test]
    fn mc_is_deterministic() {
        let p = u(0.0, 1.0);
        let q = u(1.0, 2.0);
        let a = mc_w1_estimate(&p, &q, 20_000, 3).unwrap();
        assert_eq!(a, mc_w1_estimate(&p, &q, 20_000, 3).unwrap());
        assert!((a - 1.0).abs() < 0.02);
        assert!(mc_w1_estimate(&p, &p, 20_000, 4).unwrap() < 0.02);
    }

    #[test]
    fn report_for_reference_instance() {
        let r = divergence_report(2.0, 1.0, 101).unwrap();
        assert!((r.eps_star_d2 - 1.0 / 3.0).abs() < 1e-12);
        assert!((r.eps_star_d3 - 1.0 / 3.0).abs() < 1e-12);
        assert!(r.ordering_holds);
        assert_eq!(r.w1_d2.len(), 101);
        assert!(divergence_report(1.0, 2.0, 11).is_err());
    }
}
