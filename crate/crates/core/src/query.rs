//! Query-stage scoring and batch selection.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{forward_classifier, forward_critic, NetworkParams, PROB_FLOOR};
use crate::pool::Pool;
use crate::train::HyperParams;

/// `max_y −ln p_y`, i.e. `−ln` of the smallest clamped probability.
pub fn score_single_worst(p: &[f64]) -> f64 {
    let min = p.iter().copied().fold(f64::INFINITY, f64::min);
    -min.max(PROB_FLOOR).ln()
}

/// `Σ_y −ln p_y` with clamped logs.
pub fn score_l1(p: &[f64]) -> f64 {
    p.iter().map(|&v| -v.max(PROB_FLOOR).ln()).sum()
}

/// `β · score_single_worst + (1 − β) · score_l1`
pub fn uncertainty(p: &[f64], beta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Domain(format!("mixture coefficient {beta} outside [0, 1]")));
    }
    Ok(beta * score_single_worst(p) + (1.0 - beta) * score_l1(p))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryScore {
    pub index: usize,
    pub uncertainty: f64,
    pub diversity: f64,
    pub combined: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Waal,
    Random,
    LeastConfidence,
    Margin,
    Entropy,
    KcenterGreedy,
    Kmedian,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Waal,
        Strategy::Random,
        Strategy::LeastConfidence,
        Strategy::Margin,
        Strategy::Entropy,
        Strategy::KcenterGreedy,
        Strategy::Kmedian,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Waal => "waal",
            Strategy::Random => "random",
            Strategy::LeastConfidence => "least_confidence",
            Strategy::Margin => "margin",
            Strategy::Entropy => "entropy",
            Strategy::KcenterGreedy => "kcenter_greedy",
            Strategy::Kmedian => "kmedian",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config("strategy", format!("unknown strategy {s:?}")))
    }
}

fn check_budget(pool: &Pool, b: usize) -> Result<()> {
    let available = pool.unlabeled().len();
    if b > available {
        return Err(Error::Budget { requested: b, available });
    }
    Ok(())
}

/// Uncertainty, critic output and combined score for every unlabeled point,
/// in unlabeled-set order.
pub fn score_unlabeled(pool: &Pool, params: &NetworkParams, hp: &HyperParams) -> Result<Vec<QueryScore>> {
    let idx = pool.unlabeled();
    let x = pool.rows(idx);
    let probs = forward_classifier(params, x.view())?;
    let critic = forward_critic(params, x.view())?;
    idx.iter()
        .zip(probs.rows())
        .zip(critic.iter())
        .map(|((&index, row), &diversity)| {
            let u = uncertainty(&row.to_vec(), hp.mixture_coeff)?;
            Ok(QueryScore {
                index,
                uncertainty: u,
                diversity,
                combined: u - hp.selection_coeff * diversity,
            })
        })
        .collect()
}

/// Sorts by `key` ascending with ascending-index tie-breaking and keeps `b`.
fn take_smallest<T: Copy>(mut items: Vec<T>, b: usize, key: impl Fn(&T) -> (f64, usize)) -> Vec<T> {
    items.sort_by(|x, y| {
        let (kx, ix) = key(x);
        let (ky, iy) = key(y);
        kx.partial_cmp(&ky).unwrap_or(Ordering::Equal).then(ix.cmp(&iy))
    });
    items.truncate(b);
    items
}

/// The `b` unlabeled points with the smallest combined score, in rank order.
pub fn waal_select(pool: &Pool, params: &NetworkParams, hp: &HyperParams, b: usize) -> Result<Vec<QueryScore>> {
    check_budget(pool, b)?;
    let scores = score_unlabeled(pool, params, hp)?;
    Ok(take_smallest(scores, b, |s| (s.combined, s.index)))
}

pub fn waal_query(pool: &Pool, params: &NetworkParams, hp: &HyperParams, b: usize) -> Result<Vec<usize>> {
    Ok(waal_select(pool, params, hp, b)?.into_iter().map(|s| s.index).collect())
}

fn top_two(row: ArrayView1<f64>) -> (f64, f64) {
    let mut first = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    for &v in row {
        if v > first {
            second = first;
            first = v;
        } else if v > second {
            second = v;
        }
    }
    (first, second)
}

fn entropy(row: ArrayView1<f64>) -> f64 {
    -row.iter().map(|&p| p * p.max(PROB_FLOOR).ln()).sum::<f64>()
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Farthest-first traversal over unlabeled rows of `features`, starting from
/// the distances to the labeled rows. With no labeled rows the first pick is
/// the lowest unlabeled index.
pub fn kcenter_greedy(features: &Array2<f64>, labeled: &[usize], unlabeled: &[usize], b: usize) -> Vec<usize> {
    let mut min_d: Vec<f64> = unlabeled
        .iter()
        .map(|&u| {
            labeled
                .iter()
                .map(|&l| sq_dist(features.row(u), features.row(l)))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mut taken = vec![false; unlabeled.len()];
    let mut picks = Vec::with_capacity(b);
    for _ in 0..b.min(unlabeled.len()) {
        let mut best: Option<usize> = None;
        for j in 0..unlabeled.len() {
            if taken[j] {
                continue;
            }
            best = match best {
                None => Some(j),
                Some(k) if min_d[j] > min_d[k] || (min_d[j] == min_d[k] && unlabeled[j] < unlabeled[k]) => Some(j),
                keep => keep,
            };
        }
        let j = best.expect("a free unlabeled point remains");
        taken[j] = true;
        picks.push(unlabeled[j]);
        let c = features.row(unlabeled[j]);
        for (k, &u) in unlabeled.iter().enumerate() {
            min_d[k] = min_d[k].min(sq_dist(features.row(u), c));
        }
    }
    picks
}

pub const KMEDIAN_MAX_ITERS: usize = 100;

/// K-median clustering of `points` (rows of `features`) into `k` clusters
/// with ℓ₂ cost. Seeds by distance-weighted sampling, then alternates
/// nearest-medoid assignment and per-cluster medoid updates. Returns the
/// medoids in ascending index order.
pub fn kmedian(features: &Array2<f64>, points: &[usize], k: usize, seed: u64) -> Vec<usize> {
    let n = points.len();
    let k = k.min(n);
    if k == 0 {
        return Vec::new();
    }
    let dist = |a: usize, b: usize| sq_dist(features.row(points[a]), features.row(points[b])).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centers = vec![rng.gen_range(0..n)];
    let mut d: Vec<f64> = (0..n).map(|i| dist(i, centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            // fewer distinct points than clusters
            (0..n).find(|i| !centers.contains(i)).expect("k <= n")
        };
        centers.push(next);
        for (i, di) in d.iter_mut().enumerate() {
            *di = di.min(dist(i, next));
        }
    }

    let mut assign = vec![0usize; n];
    for _ in 0..KMEDIAN_MAX_ITERS {
        for (i, a) in assign.iter_mut().enumerate() {
            let mut best = (0usize, f64::INFINITY);
            for (c, &m) in centers.iter().enumerate() {
                let dc = dist(i, m);
                if dc < best.1 {
                    best = (c, dc);
                }
            }
            *a = best.0;
        }
        let mut changed = false;
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| assign[i] == c).collect();
            if members.is_empty() {
                continue;
            }
            let mut best = (*center, f64::INFINITY);
            for &m in &members {
                let cost: f64 = members.iter().map(|&o| dist(m, o)).sum();
                if cost < best.1 || (cost == best.1 && points[m] < points[best.0]) {
                    best = (m, cost);
                }
            }
            if best.0 != *center {
                let old: f64 = members.iter().map(|&o| dist(*center, o)).sum();
                if best.1 < old {
                    *center = best.0;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut out: Vec<usize> = centers.into_iter().map(|c| points[c]).collect();
    out.sort_unstable();
    out
}

/// Selects `b` unlabeled points with the given strategy and reports the
/// uncertainty/diversity composition of each pick. Uncertainty-based
/// baselines rank on their own criterion; the reported composition is the
/// same for all strategies.
pub fn select(
    strategy: Strategy,
    pool: &Pool,
    params: &NetworkParams,
    hp: &HyperParams,
    b: usize,
    seed: u64,
) -> Result<Vec<QueryScore>> {
    check_budget(pool, b)?;
    if strategy == Strategy::Waal {
        return waal_select(pool, params, hp, b);
    }
    let indices = baseline_query(strategy, pool, params, b, seed)?;
    let scores = score_unlabeled(pool, params, hp)?;
    let by_index: std::collections::HashMap<usize, QueryScore> = scores.into_iter().map(|s| (s.index, s)).collect();
    Ok(indices.into_iter().map(|i| by_index[&i]).collect())
}

pub fn baseline_query(strategy: Strategy, pool: &Pool, params: &NetworkParams, b: usize, seed: u64) -> Result<Vec<usize>> {
    check_budget(pool, b)?;
    let unl = pool.unlabeled();
    let keyed = |key: &dyn Fn(ArrayView1<f64>) -> f64| -> Result<Vec<usize>> {
        let probs = forward_classifier(params, pool.rows(unl).view())?;
        let items: Vec<(f64, usize)> = probs.rows().into_iter().zip(unl).map(|(r, &i)| (key(r), i)).collect();
        Ok(take_smallest(items, b, |&(k, i)| (k, i)).into_iter().map(|(_, i)| i).collect())
    };
    match strategy {
        Strategy::Waal => Err(Error::config("strategy", "waal is not a baseline strategy")),
        Strategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(rand::seq::index::sample(&mut rng, unl.len(), b)
                .into_iter()
                .map(|j| unl[j])
                .collect())
        }
        Strategy::LeastConfidence => keyed(&|r| top_two(r).0),
        Strategy::Margin => keyed(&|r| {
            let (a, b) = top_two(r);
            a - b
        }),
        Strategy::Entropy => keyed(&|r| -entropy(r)),
        Strategy::KcenterGreedy => Ok(kcenter_greedy(pool.features(), pool.labeled(), unl, b)),
        Strategy::Kmedian => Ok(kmedian(pool.features(), unl, b, seed)),
    }
}
