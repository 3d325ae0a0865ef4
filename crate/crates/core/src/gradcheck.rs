//! Finite-difference audit of every differentiable loss over randomly sized
//! networks and batches.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::net::{
    critic_logits, forward_critic, grad_adversarial, grad_hdiv_adversarial, grad_lipschitz_penalty, grad_prediction, init_params,
    numerical_grad_check, Architecture, Gradients, NetworkParams,
};

pub const GRADCHECK_EPSILON: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_CONFIGS: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Prediction,
    Adversarial,
    HdivAdversarial,
    LipschitzPenalty,
    AdversarialWithPenalty,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Prediction,
        LossKind::Adversarial,
        LossKind::HdivAdversarial,
        LossKind::LipschitzPenalty,
        LossKind::AdversarialWithPenalty,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Prediction => "prediction",
            LossKind::Adversarial => "adversarial",
            LossKind::HdivAdversarial => "hdiv_adversarial",
            LossKind::LipschitzPenalty => "lipschitz_penalty",
            LossKind::AdversarialWithPenalty => "adversarial_with_penalty",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub loss: LossKind,
    pub config: usize,
    pub value: f64,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst_for(&self, loss: LossKind) -> f64 {
        self.results
            .iter()
            .filter(|r| r.loss == loss)
            .map(|r| r.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() <= GRADCHECK_TOLERANCE
    }
}

/// A random network with random batches.
#[derive(Clone, Debug)]
pub struct CheckCase {
    pub params: NetworkParams,
    /// `params` with a much steeper critic output layer, used by the
    /// penalty losses so that the Lipschitz quotient exceeds one.
    pub steep: NetworkParams,
    pub x_labeled: Array2<f64>,
    pub x_unlabeled: Array2<f64>,
    /// Penalty pairs: rows of `x_pair` and `x_near` lie close together.
    pub x_pair: Array2<f64>,
    pub x_near: Array2<f64>,
    pub labels: Vec<usize>,
    pub mu_prime: f64,
    pub c0: f64,
    pub mu: f64,
    pub lambda: f64,
}

fn widths(rng: &mut ChaCha8Rng, max_layers: usize) -> Vec<usize> {
    let layers = rng.gen_range(0..=max_layers);
    (0..layers).map(|_| rng.gen_range(2..=7)).collect()
}

pub fn random_case(seed: u64, config: usize) -> Result<CheckCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(config as u64 + 1);
    let input = rng.gen_range(1..=4);
    let mut feature = widths(&mut rng, 2);
    if feature.is_empty() && config.is_multiple_of(2) {
        feature.push(5);
    }
    let arch = Architecture {
        input,
        feature,
        classifier_hidden: widths(&mut rng, 1),
        critic_hidden: widths(&mut rng, 1),
        classes: rng.gen_range(2..=4),
    };
    let mut params = init_params(&arch, rng.gen())?;
    let s = rng.gen_range(2..=6);
    let sample = |rng: &mut ChaCha8Rng, rows: usize, scale: f64| {
        Array2::from_shape_fn((rows, input), |_| rng.gen_range(-scale..scale))
    };
    let x_labeled = sample(&mut rng, s, 2.0);
    let x_unlabeled = sample(&mut rng, s, 2.0);
    let x_pair = x_labeled.mapv(|v| 0.25 * v);
    let x_near = &x_pair + &sample(&mut rng, s, 0.05);
    // Central differences are only meaningful away from ReLU kinks, so biases
    // are redrawn until every hidden pre-activation clears KINK_MARGIN.
    for _ in 0..MAX_BIAS_DRAWS {
        for group in [&mut params.feature, &mut params.classifier, &mut params.critic] {
            for layer in &mut group.layers {
                layer.bias.mapv_inplace(|_| rng.gen_range(-0.3..0.3));
            }
        }
        let margin = [&x_labeled, &x_unlabeled, &x_pair, &x_near]
            .iter()
            .map(|x| relu_margin(&params, x.view()))
            .fold(f64::INFINITY, f64::min);
        if margin >= KINK_MARGIN {
            break;
        }
    }
    let steep = steepen_critic(&params, x_pair.view(), x_near.view())?;
    let labels = (0..s).map(|_| rng.gen_range(0..arch.classes)).collect();
    Ok(CheckCase {
        params,
        steep,
        x_labeled,
        x_unlabeled,
        x_pair,
        x_near,
        labels,
        mu_prime: rng.gen_range(0.1..1.0),
        c0: rng.gen_range(0.0..1.0),
        mu: rng.gen_range(0.1..1.0),
        lambda: rng.gen_range(1.0..10.0),
    })
}

const KINK_MARGIN: f64 = 1e-3;
const MAX_BIAS_DRAWS: usize = 200;

fn group_margin(layers: &[crate::net::Layer], x: Array2<f64>, relu_last: bool) -> (Array2<f64>, f64) {
    let mut h = x;
    let mut margin = f64::INFINITY;
    for (k, layer) in layers.iter().enumerate() {
        let z = h.dot(&layer.weight.t()) + &layer.bias;
        if k + 1 < layers.len() || relu_last {
            margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
            h = z.mapv(|v| v.max(0.0));
        } else {
            h = z;
        }
    }
    (h, margin)
}

/// Smallest |pre-activation| over every ReLU unit for inputs `x`.
fn relu_margin(params: &NetworkParams, x: ArrayView2<f64>) -> f64 {
    let (z, m_f) = group_margin(&params.feature.layers, x.to_owned(), true);
    let (_, m_c) = group_margin(&params.classifier.layers, z.clone(), false);
    let (_, m_d) = group_margin(&params.critic.layers, z, false);
    m_f.min(m_c).min(m_d)
}

/// Scales the critic output layer up (re-centering its logits on the pairs)
/// until the largest Lipschitz quotient over the pairs reaches 1.5, so that
/// the penalty is active without saturating the sigmoid. The total factor is
/// capped near 50.
fn steepen_critic(params: &NetworkParams, xa: ArrayView2<f64>, xb: ArrayView2<f64>) -> Result<NetworkParams> {
    let mut steep = params.clone();
    for _ in 0..15 {
        let la = critic_logits(&steep, xa)?;
        let lb = critic_logits(&steep, xb)?;
        let shift = (la.sum() + lb.sum()) / (la.len() + lb.len()) as f64;
        let last = steep.critic.layers.last_mut().expect("critic has an output layer");
        last.bias[0] -= shift;
        let ga = forward_critic(&steep, xa)?;
        let gb = forward_critic(&steep, xb)?;
        let max_q = (0..ga.len())
            .map(|i| {
                let d = (&xa.row(i) - &xb.row(i)).mapv(|v| v * v).sum().sqrt();
                (ga[i] - gb[i]).abs() / d
            })
            .fold(0.0, f64::max);
        if max_q >= 1.5 {
            break;
        }
        let last = steep.critic.layers.last_mut().expect("critic has an output layer");
        last.weight.mapv_inplace(|w| 1.3 * w);
        last.bias.mapv_inplace(|b| 1.3 * b);
    }
    Ok(steep)
}

/// The penalty routes its gradient to θd only, so its check holds θf and θh
/// at their base values.
fn with_critic_of(base: &NetworkParams, p: &NetworkParams) -> NetworkParams {
    let mut q = base.clone();
    q.critic = p.critic.clone();
    q
}

impl CheckCase {
    /// Base point of the check for `loss`.
    pub fn base(&self, loss: LossKind) -> &NetworkParams {
        match loss {
            LossKind::LipschitzPenalty | LossKind::AdversarialWithPenalty => &self.steep,
            _ => &self.params,
        }
    }
}

/// `(value, gradient)` of one loss on `case` at parameters `p`.
pub fn evaluate(loss: LossKind, case: &CheckCase, p: &NetworkParams) -> Result<(f64, Gradients)> {
    let (xl, xu) = (case.x_labeled.view(), case.x_unlabeled.view());
    let (xp, xn) = (case.x_pair.view(), case.x_near.view());
    let swap = |(g, v): (Gradients, f64)| (v, g);
    Ok(match loss {
        LossKind::Prediction => swap(grad_prediction(p, xl, &case.labels)?),
        LossKind::Adversarial => swap(grad_adversarial(p, xl, xu, case.mu_prime, case.c0)?),
        LossKind::HdivAdversarial => swap(grad_hdiv_adversarial(p, xl, xu, case.mu)?),
        LossKind::LipschitzPenalty => swap(grad_lipschitz_penalty(
            &with_critic_of(case.base(loss), p),
            xp,
            xn,
            case.lambda,
        )?),
        LossKind::AdversarialWithPenalty => {
            let (mut g, v) = grad_adversarial(p, xl, xu, case.mu_prime, case.c0)?;
            let (pg, pv) = grad_lipschitz_penalty(&with_critic_of(case.base(loss), p), xp, xn, case.lambda)?;
            g.add_scaled(&pg, 1.0);
            (v + pv, g)
        }
    })
}

/// Runs every loss over `configs` random cases. With `corrupt` set, analytic
/// prediction gradients are scaled by 1.01 (negative control).
pub fn run_gradcheck(seed: u64, configs: usize, corrupt: bool) -> Result<GradcheckReport> {
    let mut results = Vec::with_capacity(configs * LossKind::ALL.len());
    for config in 0..configs {
        let case = random_case(seed, config)?;
        for loss in LossKind::ALL {
            let value = evaluate(loss, &case, case.base(loss))?.0;
            let err = numerical_grad_check(
                case.base(loss),
                |p| {
                    let (v, mut g) = evaluate(loss, &case, p)?;
                    if corrupt && loss == LossKind::Prediction {
                        g.scale(1.01);
                    }
                    Ok((v, g))
                },
                GRADCHECK_EPSILON,
            )?;
            results.push(CheckResult {
                loss,
                config,
                value,
                max_rel_error: err,
            });
        }
    }
    Ok(GradcheckReport { seed, results })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_negative_control_fails() {
        let report = run_gradcheck(0, 4, false).unwrap();
        assert!(report.passed(), "worst {}", report.worst());
        let bad = run_gradcheck(0, 2, true).unwrap();
        assert!(!bad.passed());
        assert!(bad.worst_for(LossKind::Prediction) > 1e-3);
        let active = report
            .results
            .iter()
            .filter(|r| r.loss == LossKind::LipschitzPenalty && r.value > 0.0)
            .count();
        assert!(active > 0);
    }
}
