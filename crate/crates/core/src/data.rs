//! Synthetic datasets, CSV datasets, and initial labeled/validation/test
//! splits.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pool::Pool;

/// One labeled interval of the four-interval line dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub lo: f64,
    pub hi: f64,
    pub label: usize,
    pub mass: f64,
}

/// Four disjoint intervals on the line with alternating labels. The outer
/// two carry most of the mass, so a model fitted to the outer intervals
/// alone places its boundary between the two inner ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FourIntervals {
    pub segments: [Segment; 4],
}

impl Default for FourIntervals {
    fn default() -> Self {
        let seg = |lo, hi, label, mass| Segment { lo, hi, label, mass };
        Self {
            segments: [
                seg(0.0, 1.0, 0, 0.45),
                seg(1.0, 2.0, 1, 0.05),
                seg(2.0, 3.0, 0, 0.05),
                seg(3.0, 4.0, 1, 0.45),
            ],
        }
    }
}

impl FourIntervals {
    pub fn validate(&self) -> Result<()> {
        let s = &self.segments;
        for (i, seg) in s.iter().enumerate() {
            if !(seg.lo < seg.hi) || !seg.lo.is_finite() || !seg.hi.is_finite() {
                return Err(Error::Domain(format!("segment {i} needs finite lo < hi")));
            }
            if !(seg.mass > 0.0) {
                return Err(Error::Domain(format!("segment {i} needs positive mass")));
            }
            if seg.label > 1 {
                return Err(Error::Domain(format!("segment {i} label must be 0 or 1")));
            }
            if i > 0 {
                if s[i - 1].hi > seg.lo {
                    return Err(Error::Domain(format!("segments {} and {i} overlap or are unsorted", i - 1)));
                }
                if s[i - 1].label == seg.label {
                    return Err(Error::Domain(format!("segments {} and {i} must alternate labels", i - 1)));
                }
            }
        }
        let total: f64 = s.iter().map(|g| g.mass).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("segment masses sum to {total}, expected 1")));
        }
        Ok(())
    }

    /// Risk of the threshold rule `x ≥ t ↦ label_hi`, `x < t ↦ 1 − label_hi`.
    pub fn threshold_risk(&self, t: f64, label_hi: usize) -> f64 {
        self.segments
            .iter()
            .map(|g| {
                let below = ((t.clamp(g.lo, g.hi) - g.lo) / (g.hi - g.lo)) * g.mass;
                let above = g.mass - below;
                if g.label == label_hi {
                    below
                } else {
                    above
                }
            })
            .sum()
    }

    /// Smallest risk achievable by a single threshold.
    pub fn optimal_risk(&self) -> f64 {
        let mut best = f64::INFINITY;
        for g in &self.segments {
            for t in [g.lo, g.hi] {
                for label_hi in [0, 1] {
                    best = best.min(self.threshold_risk(t, label_hi));
                }
            }
        }
        best
    }

    /// Risk of the boundary placed midway between the two outer intervals.
    pub fn extreme_boundary_risk(&self) -> f64 {
        let s = &self.segments;
        let t = 0.5 * (s[0].hi + s[3].lo);
        self.threshold_risk(t, s[3].label)
    }
}

/// Per-interval point counts: one point each, the remainder split by mass
/// with largest-remainder rounding.
fn stratified_counts(masses: &[f64], n: usize) -> Vec<usize> {
    let k = masses.len();
    let rest = n - k;
    let raw: Vec<f64> = masses.iter().map(|m| m * rest as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut left = rest - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts.iter().map(|c| c + 1).collect()
}

/// `n` points on the line drawn uniformly within each interval, with
/// stratified per-interval counts, in seeded shuffled order.
pub fn gen_four_intervals(spec: &FourIntervals, n: usize, seed: u64) -> Result<Pool> {
    spec.validate()?;
    if n < 4 {
        return Err(Error::Domain(format!("need at least 4 points, got {n}")));
    }
    let masses: Vec<f64> = spec.segments.iter().map(|g| g.mass).collect();
    let counts = stratified_counts(&masses, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points: Vec<(f64, usize)> = Vec::with_capacity(n);
    for (g, &c) in spec.segments.iter().zip(&counts) {
        for _ in 0..c {
            points.push((rng.gen_range(g.lo..g.hi), g.label));
        }
    }
    points.shuffle(&mut rng);
    let features = Array2::from_shape_vec((n, 1), points.iter().map(|p| p.0).collect())
        .map_err(|e| Error::Shape(e.to_string()))?;
    Pool::from_labeled(features, points.into_iter().map(|p| p.1).collect(), 2)
}

/// `k` isotropic Gaussian blobs in `d` dimensions, `per_class` points each,
/// with standard deviation `spread`. Centers sit on a circle of radius 2 in
/// the first two coordinates (on a line when `d = 1`).
pub fn gen_blobs(k: usize, per_class: usize, d: usize, spread: f64, seed: u64) -> Result<Pool> {
    if k < 2 || per_class == 0 || d == 0 {
        return Err(Error::Domain(format!(
            "blobs need k ≥ 2, per_class ≥ 1, d ≥ 1 (got {k}, {per_class}, {d})"
        )));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::Domain(format!("spread must be nonnegative, got {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = k * per_class;
    let mut order: Vec<usize> = (0..n).map(|i| i % k).collect();
    order.shuffle(&mut rng);
    let mut features = Array2::zeros((n, d));
    for (i, &c) in order.iter().enumerate() {
        let angle = std::f64::consts::TAU * c as f64 / k as f64;
        let mut center = vec![0.0; d];
        if d == 1 {
            center[0] = 4.0 * c as f64 / (k - 1) as f64 - 2.0;
        } else {
            center[0] = 2.0 * angle.cos();
            center[1] = 2.0 * angle.sin();
        }
        for j in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            features[[i, j]] = center[j] + spread * z;
        }
    }
    Pool::from_labeled(features, order, k)
}

fn header_for(d: usize) -> Vec<String> {
    (0..d).map(|j| format!("f{j}")).chain(["label".to_string()]).collect()
}

/// Reads a `f0,…,f{d−1},label` CSV. Labels must lie in `0..num_classes`;
/// when `num_classes` is `None` it is one more than the largest label.
/// Line numbers in errors are 1-based and count the header.
pub fn load_csv_dataset(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<Pool> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Parse {
                line: 1,
                message: format!("{other:?}"),
            },
        })?;
    let headers = reader.headers().map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    let header: Vec<String> = headers.iter().map(|h| h.trim().to_string()).collect();
    if header.len() < 2 || header != header_for(header.len() - 1) {
        return Err(Error::Schema {
            line: 1,
            message: format!("expected header f0,…,f{{d−1}},label, got {}", header.join(",")),
        });
    }
    let d = header.len() - 1;

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if record.len() != d + 1 {
            return Err(Error::Schema {
                line,
                message: format!("expected {} fields, found {}", d + 1, record.len()),
            });
        }
        for (j, cell) in record.iter().take(d).enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                line,
                message: format!("column f{j}: {cell:?} is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("column f{j}: {cell:?} is not finite"),
                });
            }
            values.push(v);
        }
        let cell = record[d].trim();
        let label: usize = cell.parse().map_err(|_| Error::Schema {
            line,
            message: format!("label {cell:?} is not a nonnegative integer"),
        })?;
        if let Some(k) = num_classes {
            if label >= k {
                return Err(Error::Schema {
                    line,
                    message: format!("label {label} outside 0..{k}"),
                });
            }
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::Schema {
            line: 1,
            message: "dataset has no rows".into(),
        });
    }
    let k = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1)).max(2);
    let features = Array2::from_shape_vec((labels.len(), d), values).map_err(|e| Error::Shape(e.to_string()))?;
    Pool::from_labeled(features, labels, k)
}

/// Writes every row with its stored label in the format read by
/// [`load_csv_dataset`]. Floats are written in shortest round-trip form.
pub fn write_csv(pool: &Pool, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let to_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            line: 0,
            message: format!("{other:?}"),
        },
    };
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    w.write_record(header_for(pool.dim())).map_err(to_err)?;
    for (i, row) in pool.features().rows().into_iter().enumerate() {
        let label = pool
            .label(i)
            .ok_or_else(|| Error::Precondition(format!("row {i} has no label to write")))?;
        let mut fields: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        fields.push(label.to_string());
        w.write_record(&fields).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// How the initial labeled set is drawn from the training portion.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSampling {
    /// Per-class proportional allocation, at least one per class when
    /// `n_init ≥ K`.
    #[default]
    Stratified,
    /// Uniform draws restricted to training points whose first feature lies
    /// in one of `ranges`, split evenly across ranges.
    Regions { ranges: Vec<(f64, f64)> },
}

fn derive(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seeded split into test, validation, initial labeled and unlabeled sets
/// with stratified initial sampling.
pub fn split_initial(pool: Pool, n_init: usize, val_frac: f64, test_frac: f64, seed: u64) -> Result<Pool> {
    split_initial_with(pool, n_init, val_frac, test_frac, &InitSampling::Stratified, seed)
}

pub fn split_initial_with(
    pool: Pool,
    n_init: usize,
    val_frac: f64,
    test_frac: f64,
    init: &InitSampling,
    seed: u64,
) -> Result<Pool> {
    for (name, f) in [("val_frac", val_frac), ("test_frac", test_frac)] {
        if !(0.0..1.0).contains(&f) {
            return Err(Error::config(name, format!("{f} outside [0, 1)")));
        }
    }
    if n_init == 0 {
        return Err(Error::config("n_init", "must be at least 1"));
    }
    let n = pool.len();
    let n_test = (test_frac * n as f64).round() as usize;
    let n_val = (val_frac * n as f64).round() as usize;
    if n_test + n_val + n_init > n {
        return Err(Error::config(
            "n_init",
            format!("{n_init} initial + {n_val} validation + {n_test} test points exceed the {n} available"),
        ));
    }
    if let Some(i) = (0..n).find(|&i| pool.label(i).is_none()) {
        return Err(Error::Precondition(format!("index {i} has no ground-truth label to split on")));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive(seed, 10));
    let test: Vec<usize> = order[..n_test].to_vec();
    let val: Vec<usize> = order[n_test..n_test + n_val].to_vec();
    let train: Vec<usize> = order[n_test + n_val..].to_vec();

    let mut rng = derive(seed, 11);
    let labeled = match init {
        InitSampling::Stratified => stratified_pick(&pool, &train, n_init, &mut rng),
        InitSampling::Regions { ranges } => region_pick(&pool, &train, n_init, ranges, &mut rng)?,
    };
    let chosen: std::collections::HashSet<usize> = labeled.iter().copied().collect();
    let mut unlabeled: Vec<usize> = train.into_iter().filter(|i| !chosen.contains(i)).collect();
    unlabeled.sort_unstable();
    let (mut val, mut test) = (val, test);
    val.sort_unstable();
    test.sort_unstable();
    pool.with_split(labeled, unlabeled, val, test)
}

fn stratified_pick(pool: &Pool, train: &[usize], n_init: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let k = pool.num_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for &i in train {
        by_class[pool.label(i).expect("checked above")].push(i);
    }
    for members in &mut by_class {
        members.shuffle(rng);
    }
    let present: Vec<usize> = (0..k).filter(|&c| !by_class[c].is_empty()).collect();
    let mut take = vec![0usize; k];
    let mut left = n_init;
    if n_init >= present.len() {
        for &c in &present {
            take[c] = 1;
        }
        left -= present.len();
    }
    // proportional allocation of the rest, one at a time to the class
    // furthest below its share
    let total = train.len() as f64;
    while left > 0 {
        let c = present
            .iter()
            .copied()
            .filter(|&c| take[c] < by_class[c].len())
            .max_by(|&a, &b| {
                let da = by_class[a].len() as f64 / total * (n_init as f64) - take[a] as f64;
                let db = by_class[b].len() as f64 / total * (n_init as f64) - take[b] as f64;
                da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal).then(b.cmp(&a))
            })
            .expect("n_init fits in the training portion");
        take[c] += 1;
        left -= 1;
    }
    let mut picked: Vec<usize> = (0..k).flat_map(|c| by_class[c][..take[c]].to_vec()).collect();
    picked.sort_unstable();
    picked
}

fn region_pick(
    pool: &Pool,
    train: &[usize],
    n_init: usize,
    ranges: &[(f64, f64)],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if ranges.is_empty() {
        return Err(Error::config("init.ranges", "needs at least one range"));
    }
    let x = pool.features();
    let mut picked = Vec::with_capacity(n_init);
    for (r, &(lo, hi)) in ranges.iter().enumerate() {
        let share = n_init / ranges.len() + usize::from(r < n_init % ranges.len());
        let mut inside: Vec<usize> = train
            .iter()
            .copied()
            .filter(|&i| (lo..=hi).contains(&x[[i, 0]]))
            .collect();
        if inside.len() < share {
            return Err(Error::config(
                "init.ranges",
                format!("range [{lo}, {hi}] holds {} training points, need {share}", inside.len()),
            ));
        }
        inside.shuffle(rng);
        picked.extend_from_slice(&inside[..share]);
    }
    picked.sort_unstable();
    picked.dedup();
    if picked.len() != n_init {
        return Err(Error::config("init.ranges", "ranges overlap"));
    }
    Ok(picked)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_intervals_defaults() {
        let spec = FourIntervals::default();
        assert!((spec.optimal_risk() - 0.05).abs() < 1e-12);
        assert!((spec.extreme_boundary_risk() - 0.10).abs() < 1e-12);
        let pool = gen_four_intervals(&spec, 2000, 1).unwrap();
        assert_eq!(pool.len(), 2000);
        for (g, seg) in spec.segments.iter().enumerate() {
            let inside = (0..2000)
                .filter(|&i| {
                    let x = pool.features()[[i, 0]];
                    x >= seg.lo && x < seg.hi
                })
                .count();
            assert!((inside as f64 / 2000.0 - seg.mass).abs() < 0.03, "segment {g}");
        }
        assert_eq!(pool, gen_four_intervals(&spec, 2000, 1).unwrap());
    }

    #[test]
    fn four_points_one_per_interval() {
        let spec = FourIntervals::default();
        let pool = gen_four_intervals(&spec, 4, 3).unwrap();
        let mut xs: Vec<f64> = pool.features().column(0).to_vec();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (x, seg) in xs.iter().zip(&spec.segments) {
            assert!(*x >= seg.lo && *x < seg.hi);
        }
    }

    #[test]
    fn overlapping_intervals_rejected() {
        let mut spec = FourIntervals::default();
        spec.segments[1].lo = 0.5;
        assert!(matches!(gen_four_intervals(&spec, 100, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn blobs_shape() {
        let p = gen_blobs(2, 50, 2, 0.5, 7).unwrap();
        assert_eq!(p.len(), 100);
        assert_eq!(p.dim(), 2);
        let ones = (0..100).filter(|&i| p.label(i) == Some(1)).count();
        assert_eq!(ones, 50);
    }

    #[test]
    fn split_properties() {
        let p = gen_blobs(3, 30, 2, 0.5, 1).unwrap();
        let s = split_initial(p.clone(), 6, 0.2, 0.2, 5).unwrap();
        assert_eq!(s.labeled().len(), 6);
        assert_eq!(s.val().len(), 18);
        assert_eq!(s.test().len(), 18);
        assert_eq!(s.unlabeled().len(), 90 - 6 - 36);
        let classes: std::collections::HashSet<_> = s.labeled().iter().map(|&i| s.label(i)).collect();
        assert_eq!(classes.len(), 3);
        assert_eq!(s, split_initial(p.clone(), 6, 0.2, 0.2, 5).unwrap());

        let all = split_initial(p.clone(), 54, 0.2, 0.2, 5).unwrap();
        assert!(all.unlabeled().is_empty());
        assert!(matches!(split_initial(p, 55, 0.2, 0.2, 5), Err(Error::Config { .. })));
    }

    #[test]
    fn region_init_stays_in_ranges() {
        let spec = FourIntervals::default();
        let p = gen_four_intervals(&spec, 400, 2).unwrap();
        let init = InitSampling::Regions {
            ranges: vec![(0.0, 1.0), (3.0, 4.0)],
        };
        let s = split_initial_with(p, 10, 0.1, 0.1, &init, 4).unwrap();
        for &i in s.labeled() {
            let x = s.features()[[i, 0]];
            assert!(x <= 1.0 || x >= 3.0);
        }
        assert_eq!(s.labeled().len(), 10);
    }
}
