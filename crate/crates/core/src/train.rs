//! Training stage: supervised prediction loss plus the Wasserstein min-max
//! adversarial loss with redundancy-trick resampling, and the BCE
//! (H-divergence) ablation.

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{
    self, grad_adversarial, grad_hdiv_adversarial, grad_lipschitz_penalty, grad_prediction, init_params,
    sgd_momentum_step, Architecture, NetworkParams, OptimizerState, PROB_FLOOR,
};
use crate::pool::Pool;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    #[default]
    Waal,
    HdivAblation,
    SupervisedOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LipschitzMode {
    #[default]
    QuotientPenalty,
    WeightClip,
}

/// Which closed form of the labeled-side weight to use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasConvention {
    /// `(1/γ²)(γ−α)/(1+α)`
    #[default]
    PerBatch,
    /// `(1/γ)(γ−α)/(1+α)`, the full-pool weight before resampling.
    FullPool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub lr: f64,
    pub momentum: f64,
    pub minibatch: usize,
    /// Training trade-off between prediction and adversarial loss.
    pub mu: f64,
    /// Weight of the critic (diversity) term when ranking queries.
    pub selection_coeff: f64,
    /// Convex weight of the single-worst-case uncertainty bound.
    pub mixture_coeff: f64,
    pub lipschitz_mode: LipschitzMode,
    pub lambda_lip: f64,
    pub clip_value: f64,
    pub bias_convention: BiasConvention,
    pub epochs: usize,
    pub patience: usize,
    /// `(fraction of epochs, multiplicative factor)` steps.
    pub lr_decay: Vec<(f64, f64)>,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.5,
            minibatch: 64,
            mu: 1e-2,
            selection_coeff: 5.0,
            mixture_coeff: 0.5,
            lipschitz_mode: LipschitzMode::QuotientPenalty,
            lambda_lip: 10.0,
            clip_value: 0.1,
            bias_convention: BiasConvention::PerBatch,
            epochs: 50,
            patience: 10,
            lr_decay: vec![(0.5, 0.1), (0.75, 0.1)],
            seed: 0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("hyperparams.{f}");
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(field("lr"), "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(field("momentum"), "must lie in [0, 1)"));
        }
        if self.minibatch == 0 {
            return Err(Error::config(field("minibatch"), "must be at least 1"));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::config(field("mu"), "must be nonnegative"));
        }
        if !(self.selection_coeff.is_finite()) {
            return Err(Error::config(field("selection_coeff"), "must be finite"));
        }
        if !(0.0..=1.0).contains(&self.mixture_coeff) {
            return Err(Error::config(field("mixture_coeff"), "must lie in [0, 1]"));
        }
        if !(self.lambda_lip >= 0.0) {
            return Err(Error::config(field("lambda_lip"), "must be nonnegative"));
        }
        if !(self.clip_value > 0.0) {
            return Err(Error::config(field("clip_value"), "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config(field("epochs"), "must be at least 1"));
        }
        for &(frac, factor) in &self.lr_decay {
            if !(0.0..=1.0).contains(&frac) || !(factor > 0.0) {
                return Err(Error::config(field("lr_decay"), "fractions in [0, 1], factors positive"));
            }
        }
        Ok(())
    }

    /// Learning rate in effect at 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_decay
            .iter()
            .filter(|(frac, _)| epoch as f64 >= (frac * self.epochs as f64).floor())
            .fold(self.lr, |lr, (_, factor)| lr * factor)
    }
}

/// Labeled, unlabeled and query-budget counts of one interaction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub labeled: usize,
    pub unlabeled: usize,
    pub budget: usize,
}

impl SplitCounts {
    pub fn new(labeled: usize, unlabeled: usize, budget: usize) -> Result<Self> {
        if labeled == 0 {
            return Err(Error::Domain("need at least one labeled point".into()));
        }
        if budget > unlabeled {
            return Err(Error::Domain(format!("budget {budget} exceeds {unlabeled} unlabeled points")));
        }
        Ok(Self {
            labeled,
            unlabeled,
            budget,
        })
    }

    /// Unbalanced ratio `U / L`.
    pub fn gamma(&self) -> f64 {
        self.unlabeled as f64 / self.labeled as f64
    }

    /// Query ratio `B / L`.
    pub fn alpha(&self) -> f64 {
        self.budget as f64 / self.labeled as f64
    }
}

fn check_gamma_alpha(gamma: f64, alpha: f64) -> Result<()> {
    if !(gamma > 0.0) {
        return Err(Error::Domain(format!("unbalanced ratio must be positive, got {gamma}")));
    }
    if !(0.0..=gamma).contains(&alpha) {
        return Err(Error::Domain(format!("query ratio {alpha} outside [0, {gamma}]")));
    }
    Ok(())
}

/// `C₀ = (1/γ²)(γ−α)/(1+α)`, the labeled-side weight of a resampled batch.
pub fn bias_coefficient(gamma: f64, alpha: f64) -> Result<f64> {
    bias_coefficient_with(gamma, alpha, BiasConvention::PerBatch)
}

pub fn bias_coefficient_with(gamma: f64, alpha: f64, convention: BiasConvention) -> Result<f64> {
    check_gamma_alpha(gamma, alpha)?;
    let full_pool = (gamma - alpha) / (gamma * (1.0 + alpha));
    Ok(match convention {
        BiasConvention::FullPool => full_pool,
        BiasConvention::PerBatch => full_pool / gamma,
    })
}

/// `μ′ = γμ / (1+γ)`
pub fn mu_prime(mu: f64, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::Domain(format!("unbalanced ratio must be positive, got {gamma}")));
    }
    Ok(gamma * mu / (1.0 + gamma))
}

/// Evaluates both sides of the pool-level coefficient identities behind the
/// resampled adversarial loss and returns the worst relative error:
///
/// * `μ (1/(L+B) − 1/(L+U)) = μ′ (1/γ) ((γ−α)/(1+α)) (1/L)`
/// * `μ / (L+U) = μ′ / U`
pub fn coefficient_consistency(counts: SplitCounts) -> Result<f64> {
    let (l, u, b) = (counts.labeled as f64, counts.unlabeled as f64, counts.budget as f64);
    if counts.unlabeled == 0 {
        return Err(Error::Domain("unbalanced ratio needs unlabeled points".into()));
    }
    let mu = 1.0;
    let (gamma, alpha) = (counts.gamma(), counts.alpha());
    let mp = mu_prime(mu, gamma)?;
    let rel = |x: f64, y: f64| {
        let scale = x.abs().max(y.abs());
        if scale == 0.0 {
            0.0
        } else {
            (x - y).abs() / scale
        }
    };
    let labeled_lhs = mu * (1.0 / (l + b) - 1.0 / (l + u));
    let labeled_rhs = mp * bias_coefficient_with(gamma, alpha, BiasConvention::FullPool)? / l;
    let unlabeled_lhs = mu / (l + u);
    let unlabeled_rhs = mp / u;
    Ok(rel(labeled_lhs, labeled_rhs).max(rel(unlabeled_lhs, unlabeled_rhs)))
}

/// Mean negative log-likelihood with the log clamp.
pub fn prediction_loss(probs: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    if probs.nrows() == 0 {
        return Err(Error::Precondition("prediction loss needs a nonempty batch".into()));
    }
    if labels.len() != probs.nrows() {
        return Err(Error::Shape(format!("{} rows but {} labels", probs.nrows(), labels.len())));
    }
    let k = probs.ncols();
    let mut total = 0.0;
    for (row, &y) in probs.rows().into_iter().zip(labels) {
        if y >= k {
            return Err(Error::Precondition(format!("label {y} outside 0..{k}")));
        }
        total -= row[y].max(PROB_FLOOR).ln();
    }
    Ok(total / labels.len() as f64)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// `μ′ (mean g_u − c0 · mean g_l)` for one training batch.
pub fn adversarial_value(g_unlabeled: &[f64], g_labeled: &[f64], mu_prime: f64, c0: f64) -> Result<f64> {
    if g_unlabeled.len() != g_labeled.len() {
        return Err(Error::Precondition(format!(
            "critic batches differ in size: {} vs {}",
            g_unlabeled.len(),
            g_labeled.len()
        )));
    }
    Ok(mu_prime * (mean(g_unlabeled) - c0 * mean(g_labeled)))
}

/// `−μ (mean ln g_u + mean ln(1 − g_l))` with clamped logs.
pub fn hdiv_adversarial_value(g_unlabeled: &[f64], g_labeled: &[f64], mu: f64) -> f64 {
    let lu: Vec<f64> = g_unlabeled.iter().map(|g| g.max(PROB_FLOOR).ln()).collect();
    let ll: Vec<f64> = g_labeled.iter().map(|g| (1.0 - g).max(PROB_FLOOR).ln()).collect();
    -mu * (mean(&lu) + mean(&ll))
}

/// `(μ′, C₀)` for the current pool counts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialWeights {
    pub mu_prime: f64,
    pub c0: f64,
}

impl AdversarialWeights {
    pub fn for_counts(counts: SplitCounts, mu: f64, convention: BiasConvention) -> Result<Self> {
        let gamma = counts.gamma();
        Ok(Self {
            mu_prime: mu_prime(mu, gamma)?,
            c0: bias_coefficient_with(gamma, counts.alpha(), convention)?,
        })
    }
}

/// Independent random streams for unlabeled shuffling and labeled resampling.
#[derive(Clone, Debug)]
pub struct TrainRngs {
    pub unlabeled: ChaCha8Rng,
    pub labeled: ChaCha8Rng,
}

impl TrainRngs {
    pub fn new(seed: u64) -> Self {
        let mut unlabeled = ChaCha8Rng::seed_from_u64(seed);
        unlabeled.set_stream(1);
        let mut labeled = ChaCha8Rng::seed_from_u64(seed);
        labeled.set_stream(2);
        Self { unlabeled, labeled }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub prediction_loss: f64,
    pub adversarial_value: f64,
    pub penalty: f64,
    pub val_accuracy: f64,
}

/// Knobs of a single epoch that depend on the round rather than on the
/// hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochPlan {
    pub mode: TrainingMode,
    pub lr: f64,
    pub weights: AdversarialWeights,
}

/// One pass over the unlabeled pool in shuffled mini-batches of size `S`.
/// Each unlabeled batch is paired with `S` labeled points drawn with
/// replacement; θh descends the prediction loss, θf descends prediction plus
/// adversarial loss, θd ascends the adversarial loss and descends the
/// Lipschitz penalty. A trailing partial batch is dropped.
pub fn train_epoch(
    pool: &Pool,
    params: &mut NetworkParams,
    opt: &mut OptimizerState,
    hp: &HyperParams,
    plan: &EpochPlan,
    rngs: &mut TrainRngs,
) -> Result<EpochStats> {
    let s = hp.minibatch;
    if pool.unlabeled().len() < s {
        return Err(Error::config(
            "hyperparams.minibatch",
            format!("{s} exceeds the {} unlabeled points", pool.unlabeled().len()),
        ));
    }
    if pool.labeled().is_empty() {
        return Err(Error::Precondition("training needs at least one labeled point".into()));
    }
    let mut order = pool.unlabeled().to_vec();
    order.shuffle(&mut rngs.unlabeled);
    let labeled = pool.labeled();

    let mut stats = EpochStats {
        lr: plan.lr,
        ..Default::default()
    };
    for batch in order.chunks_exact(s) {
        let draw: Vec<usize> = (0..s)
            .map(|_| labeled[rngs.labeled.gen_range(0..labeled.len())])
            .collect();
        let x_u = pool.rows(batch);
        let x_l = pool.rows(&draw);
        let y_l = pool.labels_of(&draw)?;

        let (mut step, loss) = grad_prediction(params, x_l.view(), &y_l)?;
        stats.prediction_loss += loss;
        match plan.mode {
            TrainingMode::SupervisedOnly => {}
            TrainingMode::Waal => {
                let w = plan.weights;
                let (adv, value) = grad_adversarial(params, x_l.view(), x_u.view(), w.mu_prime, w.c0)?;
                step.feature.add_scaled(&adv.feature, 1.0);
                step.critic.add_scaled(&adv.critic, -1.0);
                stats.adversarial_value += value;
                if hp.lipschitz_mode == LipschitzMode::QuotientPenalty {
                    let (pen, value) = grad_lipschitz_penalty(params, x_l.view(), x_u.view(), hp.lambda_lip)?;
                    step.critic.add_scaled(&pen.critic, 1.0);
                    stats.penalty += value;
                }
            }
            TrainingMode::HdivAblation => {
                let (adv, value) = grad_hdiv_adversarial(params, x_l.view(), x_u.view(), hp.mu)?;
                step.feature.add_scaled(&adv.feature, -1.0);
                step.critic.add_scaled(&adv.critic, 1.0);
                stats.adversarial_value += value;
            }
        }
        sgd_momentum_step(params, &step, opt, plan.lr, hp.momentum)?;
        if plan.mode != TrainingMode::SupervisedOnly && hp.lipschitz_mode == LipschitzMode::WeightClip {
            params.clip_critic(hp.clip_value);
        }
        stats.steps += 1;
    }
    if stats.steps > 0 {
        let n = stats.steps as f64;
        stats.prediction_loss /= n;
        stats.adversarial_value /= n;
        stats.penalty /= n;
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("parameters diverged during training".into()));
    }
    Ok(stats)
}

/// Fraction of `indices` whose arg-max prediction matches the stored label.
pub fn accuracy(params: &NetworkParams, pool: &Pool, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let probs = net::forward_classifier(params, pool.rows(indices).view())?;
    let labels = pool.labels_of(indices)?;
    let correct = probs
        .rows()
        .into_iter()
        .zip(&labels)
        .filter(|(row, &y)| argmax(row.iter().copied()) == y)
        .count();
    Ok(correct as f64 / indices.len() as f64)
}

/// Index of the largest value, lowest index on ties.
pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-validation snapshot.
    pub params: NetworkParams,
    pub history: Vec<EpochStats>,
    /// 0-based epoch of the returned snapshot.
    pub best_epoch: usize,
    pub weights: AdversarialWeights,
}

/// Fresh initialization from `hp.seed`, then up to `hp.epochs` epochs with
/// step learning-rate decay and early stopping on validation accuracy.
/// Training stops once `patience + 1` consecutive epochs fail to improve on
/// the best validation accuracy. `budget` is the per-round query size used
/// for the bias coefficient.
pub fn train_from_scratch(
    pool: &Pool,
    arch: &Architecture,
    hp: &HyperParams,
    mode: TrainingMode,
    budget: usize,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    hp.validate()?;
    if pool.val().is_empty() {
        return Err(Error::config("val_frac", "validation split is empty"));
    }
    let unlabeled = pool.unlabeled().len();
    if unlabeled == 0 {
        return Err(Error::config("n_init", "no unlabeled points left to train against"));
    }
    // late rounds can have fewer unlabeled points than one mini-batch
    let mut hp = hp.clone();
    hp.minibatch = hp.minibatch.min(unlabeled);

    let counts = SplitCounts::new(pool.labeled().len(), unlabeled, budget.min(unlabeled))?;
    let weights = AdversarialWeights::for_counts(counts, hp.mu, hp.bias_convention)?;

    let mut params = init_params(arch, hp.seed)?;
    let mut opt = OptimizerState::new(&params);
    let mut rngs = TrainRngs::new(hp.seed);

    let mut best = (params.clone(), f64::NEG_INFINITY, 0usize);
    let mut history = Vec::with_capacity(hp.epochs);
    let mut since_best = 0usize;
    for epoch in 0..hp.epochs {
        let plan = EpochPlan {
            mode,
            lr: hp.lr_at(epoch),
            weights,
        };
        let mut stats = train_epoch(pool, &mut params, &mut opt, &hp, &plan, &mut rngs)?;
        stats.epoch = epoch;
        stats.val_accuracy = accuracy(&params, pool, pool.val())?;
        on_epoch(&stats);
        if stats.val_accuracy > best.1 {
            best = (params.clone(), stats.val_accuracy, epoch);
            since_best = 0;
        } else {
            since_best += 1;
        }
        history.push(stats);
        if since_best > hp.patience {
            break;
        }
    }
    Ok(TrainOutcome {
        params: best.0,
        history,
        best_epoch: best.2,
        weights,
    })
}
