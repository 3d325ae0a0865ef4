//! Fixed-architecture MLP numerics shared by training and querying.
//!
//! A network is three parameter groups: a ReLU feature extractor, a softmax
//! classifier head and a sigmoid critic head. Both heads read the feature
//! extractor output. Gradients are computed analytically, one backward pass
//! per loss.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities (and critic outputs) are clamped to this floor before logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Pairs closer than this are treated as coincident by the Lipschitz penalty.
const COINCIDENT_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `[out × in]`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_width(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_width(&self) -> usize {
        self.weight.nrows()
    }
}

/// A chain of dense layers.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamGroup {
    pub layers: Vec<Layer>,
}

impl ParamGroup {
    /// He-uniform weights and zero biases for the chained `widths`.
    pub fn init(widths: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Shape(format!(
                "a layer chain needs at least two widths, got {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(Error::Shape(format!("zero width in {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .map(|w| {
                let (input, output) = (w[0], w[1]);
                let bound = (6.0 / input as f64).sqrt();
                let weight = Array2::from_shape_fn((output, input), |_| rng.gen_range(-bound..bound));
                Layer {
                    weight,
                    bias: Array1::zeros(output),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros(widths: &[usize]) -> Self {
        Self {
            layers: widths.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.input_width(), l.output_width()))
                .collect(),
        }
    }

    pub fn input_width(&self) -> Option<usize> {
        self.layers.first().map(Layer::input_width)
    }

    pub fn output_width(&self) -> Option<usize> {
        self.layers.last().map(Layer::output_width)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    fn check_chain(&self, name: &str) -> Result<()> {
        for (k, pair) in self.layers.windows(2).enumerate() {
            if pair[0].output_width() != pair[1].input_width() {
                return Err(Error::Shape(format!(
                    "{name} layer {k} outputs {} but layer {} expects {}",
                    pair[0].output_width(),
                    k + 1,
                    pair[1].input_width()
                )));
            }
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.output_width() {
                return Err(Error::Shape(format!("{name} layer {k} bias length mismatch")));
            }
        }
        Ok(())
    }

    fn same_shape(&self, other: &ParamGroup) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.dim() == b.weight.dim() && a.bias.len() == b.bias.len())
    }

    pub(crate) fn add_scaled(&mut self, other: &ParamGroup, alpha: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.scaled_add(alpha, &b.weight);
            a.bias.scaled_add(alpha, &b.bias);
        }
    }

    fn scale(&mut self, alpha: f64) {
        for v in self.values_mut() {
            *v *= alpha;
        }
    }

    fn max_abs(&self) -> f64 {
        self.values().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Widths of the three groups. An empty `feature` list makes the feature
/// extractor the identity map.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub input: usize,
    pub feature: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub classes: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input: 2,
            feature: vec![32],
            classifier_hidden: vec![16],
            critic_hidden: vec![16],
            classes: 2,
        }
    }
}

impl Architecture {
    pub fn feature_widths(&self) -> Vec<usize> {
        std::iter::once(self.input).chain(self.feature.iter().copied()).collect()
    }

    pub fn feature_output(&self) -> usize {
        self.feature.last().copied().unwrap_or(self.input)
    }

    pub fn classifier_widths(&self) -> Vec<usize> {
        let mut w = vec![self.feature_output()];
        w.extend(&self.classifier_hidden);
        w.push(self.classes);
        w
    }

    pub fn critic_widths(&self) -> Vec<usize> {
        let mut w = vec![self.feature_output()];
        w.extend(&self.critic_hidden);
        w.push(1);
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 {
            return Err(Error::Shape("input width must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Shape(format!("need at least 2 classes, got {}", self.classes)));
        }
        let all = self
            .feature
            .iter()
            .chain(&self.classifier_hidden)
            .chain(&self.critic_hidden);
        if all.copied().any(|w| w == 0) {
            return Err(Error::Shape("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// Parameters of the feature extractor (θf), classifier head (θh) and
/// critic head (θd).
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub input_width: usize,
    pub feature: ParamGroup,
    pub classifier: ParamGroup,
    pub critic: ParamGroup,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Feature,
    Classifier,
    Critic,
}

impl NetworkParams {
    /// All-zero parameters for `arch`.
    pub fn zeros(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            input_width: arch.input,
            feature: ParamGroup::zeros(&arch.feature_widths()),
            classifier: ParamGroup::zeros(&arch.classifier_widths()),
            critic: ParamGroup::zeros(&arch.critic_widths()),
        })
    }

    pub fn feature_output(&self) -> usize {
        self.feature.output_width().unwrap_or(self.input_width)
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.output_width().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        self.feature.check_chain("feature")?;
        self.classifier.check_chain("classifier")?;
        self.critic.check_chain("critic")?;
        if let Some(w) = self.feature.input_width() {
            if w != self.input_width {
                return Err(Error::Shape(format!(
                    "feature extractor expects {w} inputs, network declares {}",
                    self.input_width
                )));
            }
        }
        let f = self.feature_output();
        if self.classifier.input_width() != Some(f) || self.critic.input_width() != Some(f) {
            return Err(Error::Shape(format!("heads must read the {f}-wide feature output")));
        }
        if self.num_classes() < 2 {
            return Err(Error::Shape("classifier needs at least 2 outputs".into()));
        }
        if self.critic.output_width() != Some(1) {
            return Err(Error::Shape("critic must have a single output".into()));
        }
        Ok(())
    }

    pub fn group(&self, g: Group) -> &ParamGroup {
        match g {
            Group::Feature => &self.feature,
            Group::Classifier => &self.classifier,
            Group::Critic => &self.critic,
        }
    }

    pub fn group_mut(&mut self, g: Group) -> &mut ParamGroup {
        match g {
            Group::Feature => &mut self.feature,
            Group::Classifier => &mut self.classifier,
            Group::Critic => &mut self.critic,
        }
    }

    pub fn num_params(&self) -> usize {
        self.feature.num_params() + self.classifier.num_params() + self.critic.num_params()
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.feature
            .values()
            .chain(self.classifier.values())
            .chain(self.critic.values())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.feature
            .values_mut()
            .chain(self.classifier.values_mut())
            .chain(self.critic.values_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.feature.is_finite() && self.classifier.is_finite() && self.critic.is_finite()
    }

    /// Clamp every critic parameter to `[-clip, clip]`.
    pub fn clip_critic(&mut self, clip: f64) {
        for v in self.critic.values_mut() {
            *v = v.clamp(-clip, clip);
        }
    }
}

/// He-uniform initialization, fully determined by `(arch, seed)`.
pub fn init_params(arch: &Architecture, seed: u64) -> Result<NetworkParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feature = if arch.feature.is_empty() {
        ParamGroup::default()
    } else {
        ParamGroup::init(&arch.feature_widths(), &mut rng)?
    };
    let classifier = ParamGroup::init(&arch.classifier_widths(), &mut rng)?;
    let critic = ParamGroup::init(&arch.critic_widths(), &mut rng)?;
    Ok(NetworkParams {
        input_width: arch.input,
        feature,
        classifier,
        critic,
    })
}

/// Per-parameter derivatives, shape-congruent with [`NetworkParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub feature: ParamGroup,
    pub classifier: ParamGroup,
    pub critic: ParamGroup,
}

impl Gradients {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        Self {
            feature: params.feature.zeros_like(),
            classifier: params.classifier.zeros_like(),
            critic: params.critic.zeros_like(),
        }
    }

    pub fn group(&self, g: Group) -> &ParamGroup {
        match g {
            Group::Feature => &self.feature,
            Group::Classifier => &self.classifier,
            Group::Critic => &self.critic,
        }
    }

    pub fn group_mut(&mut self, g: Group) -> &mut ParamGroup {
        match g {
            Group::Feature => &mut self.feature,
            Group::Classifier => &mut self.classifier,
            Group::Critic => &mut self.critic,
        }
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.feature
            .values()
            .chain(self.classifier.values())
            .chain(self.critic.values())
    }

    pub fn is_finite(&self) -> bool {
        self.feature.is_finite() && self.classifier.is_finite() && self.critic.is_finite()
    }

    pub fn max_abs(&self) -> f64 {
        self.feature
            .max_abs()
            .max(self.classifier.max_abs())
            .max(self.critic.max_abs())
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, other: &Gradients, alpha: f64) {
        self.feature.add_scaled(&other.feature, alpha);
        self.classifier.add_scaled(&other.classifier, alpha);
        self.critic.add_scaled(&other.critic, alpha);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.feature.scale(alpha);
        self.classifier.scale(alpha);
        self.critic.scale(alpha);
    }

    fn congruent(&self, params: &NetworkParams) -> bool {
        self.feature.same_shape(&params.feature)
            && self.classifier.same_shape(&params.classifier)
            && self.critic.same_shape(&params.critic)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Gradients,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &NetworkParams) -> Self {
        Self {
            velocity: Gradients::zeros_like(params),
            step: 0,
        }
    }
}

/// `v ← momentum·v + grad; θ ← θ − lr·v` on every parameter.
pub fn sgd_momentum_step(
    params: &mut NetworkParams,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if !grads.congruent(params) || !state.velocity.congruent(params) {
        return Err(Error::Shape("gradients or optimizer state do not match parameters".into()));
    }
    for g in [Group::Feature, Group::Classifier, Group::Critic] {
        let p = params.group_mut(g);
        let v = state.velocity.group_mut(g);
        let d = grads.group(g);
        for ((pl, vl), dl) in p.layers.iter_mut().zip(v.layers.iter_mut()).zip(&d.layers) {
            Zip::from(&mut pl.weight)
                .and(&mut vl.weight)
                .and(&dl.weight)
                .for_each(|p, v, d| {
                    *v = momentum * *v + d;
                    *p -= lr * *v;
                });
            Zip::from(&mut pl.bias)
                .and(&mut vl.bias)
                .and(&dl.bias)
                .for_each(|p, v, d| {
                    *v = momentum * *v + d;
                    *p -= lr * *v;
                });
        }
    }
    state.step += 1;
    Ok(())
}

// ---------------------------------------------------------------------------
// Forward / backward through a layer chain.

struct Trace {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Array2<f64>>,
    relu_last: bool,
}

fn forward_group(group: &ParamGroup, x: ArrayView2<f64>, relu_last: bool) -> (Array2<f64>, Trace) {
    let mut trace = Trace {
        inputs: Vec::with_capacity(group.layers.len()),
        pre: Vec::with_capacity(group.layers.len()),
        relu_last,
    };
    let mut h = x.to_owned();
    let last = group.layers.len().saturating_sub(1);
    for (k, layer) in group.layers.iter().enumerate() {
        let z = h.dot(&layer.weight.t()) + &layer.bias;
        let out = if k < last || relu_last {
            z.mapv(|v| v.max(0.0))
        } else {
            z.clone()
        };
        trace.inputs.push(std::mem::replace(&mut h, out));
        trace.pre.push(z);
    }
    (h, trace)
}

/// Backpropagates `d_out` (gradient w.r.t. the chain output) and returns the
/// gradient w.r.t. the chain input. Parameter gradients accumulate into `acc`.
fn backward_group(group: &ParamGroup, trace: &Trace, d_out: Array2<f64>, acc: &mut ParamGroup) -> Array2<f64> {
    let mut d = d_out;
    let last = group.layers.len().saturating_sub(1);
    for k in (0..group.layers.len()).rev() {
        if k < last || trace.relu_last {
            Zip::from(&mut d).and(&trace.pre[k]).for_each(|d, &z| {
                if z <= 0.0 {
                    *d = 0.0;
                }
            });
        }
        let a = &mut acc.layers[k];
        a.weight += &d.t().dot(&trace.inputs[k]);
        a.bias += &d.sum_axis(Axis(0));
        d = d.dot(&group.layers[k].weight);
    }
    d
}

fn check_input(params: &NetworkParams, x: ArrayView2<f64>) -> Result<()> {
    if x.ncols() != params.input_width {
        return Err(Error::Shape(format!(
            "input has {} columns, network expects {}",
            x.ncols(),
            params.input_width
        )));
    }
    Ok(())
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    p
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Feature extractor output `[n × f]`.
pub fn embed(params: &NetworkParams, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_input(params, x)?;
    Ok(forward_group(&params.feature, x, true).0)
}

/// Class probabilities `[n × K]`, floored at [`PROB_FLOOR`].
pub fn forward_classifier(params: &NetworkParams, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_input(params, x)?;
    let (feat, _) = forward_group(&params.feature, x, true);
    let (logits, _) = forward_group(&params.classifier, feat.view(), false);
    Ok(softmax_rows(&logits).mapv(|p| p.max(PROB_FLOOR)))
}

/// Critic pre-sigmoid scores.
pub fn critic_logits(params: &NetworkParams, x: ArrayView2<f64>) -> Result<Array1<f64>> {
    check_input(params, x)?;
    let (feat, _) = forward_group(&params.feature, x, true);
    let (s, _) = forward_group(&params.critic, feat.view(), false);
    Ok(s.column(0).to_owned())
}

/// Critic scores in `[0, 1]`.
pub fn forward_critic(params: &NetworkParams, x: ArrayView2<f64>) -> Result<Array1<f64>> {
    check_input(params, x)?;
    let (feat, _) = forward_group(&params.feature, x, true);
    let (s, _) = forward_group(&params.critic, feat.view(), false);
    Ok(s.column(0).mapv(sigmoid))
}

/// Mean cross-entropy on `(x, labels)` and its gradient over θf and θh.
pub fn grad_prediction(params: &NetworkParams, x: ArrayView2<f64>, labels: &[usize]) -> Result<(Gradients, f64)> {
    check_input(params, x)?;
    let n = x.nrows();
    if n == 0 {
        return Err(Error::Precondition("prediction gradient needs a nonempty batch".into()));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} rows but {} labels", labels.len())));
    }
    let k = params.num_classes();
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Precondition(format!("label {bad} outside 0..{k}")));
    }
    let (feat, ftrace) = forward_group(&params.feature, x, true);
    let (logits, ctrace) = forward_group(&params.classifier, feat.view(), false);
    let probs = softmax_rows(&logits);

    let mut loss = 0.0;
    let mut d_logits = probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        let py = probs[[i, y]];
        loss -= py.max(PROB_FLOOR).ln();
        if py < PROB_FLOOR {
            // clamped: loss is locally constant in this row
            d_logits.row_mut(i).fill(0.0);
        } else {
            d_logits[[i, y]] -= 1.0;
        }
    }
    loss /= n as f64;
    d_logits /= n as f64;

    let mut grads = Gradients::zeros_like(params);
    let d_feat = backward_group(&params.classifier, &ctrace, d_logits, &mut grads.classifier);
    backward_group(&params.feature, &ftrace, d_feat, &mut grads.feature);
    Ok((grads, loss))
}

/// Backpropagates per-row derivatives w.r.t. critic scores (post-sigmoid)
/// through the critic and, optionally, the feature extractor.
fn critic_backward(
    params: &NetworkParams,
    x: ArrayView2<f64>,
    d_score: impl Fn(usize, f64) -> f64,
    grads: &mut Gradients,
    into_feature: bool,
) {
    let (feat, ftrace) = forward_group(&params.feature, x, true);
    let (s, ctrace) = forward_group(&params.critic, feat.view(), false);
    let mut d = Array2::zeros(s.raw_dim());
    for i in 0..s.nrows() {
        let g = sigmoid(s[[i, 0]]);
        d[[i, 0]] = d_score(i, g) * g * (1.0 - g);
    }
    let d_feat = backward_group(&params.critic, &ctrace, d, &mut grads.critic);
    if into_feature {
        backward_group(&params.feature, &ftrace, d_feat, &mut grads.feature);
    }
}

/// Wasserstein adversarial value `μ′ (mean g(x_u) − c0 · mean g(x_l))` and
/// its gradient over θf and θd. The caller descends on θf and ascends on θd.
pub fn grad_adversarial(
    params: &NetworkParams,
    x_labeled: ArrayView2<f64>,
    x_unlabeled: ArrayView2<f64>,
    mu_prime: f64,
    c0: f64,
) -> Result<(Gradients, f64)> {
    check_input(params, x_labeled)?;
    check_input(params, x_unlabeled)?;
    let s = x_unlabeled.nrows();
    if s == 0 || x_labeled.nrows() != s {
        return Err(Error::Precondition(format!(
            "adversarial batches must share a positive size, got {} labeled and {s} unlabeled",
            x_labeled.nrows()
        )));
    }
    let mut grads = Gradients::zeros_like(params);
    if mu_prime == 0.0 {
        return Ok((grads, 0.0));
    }
    let g_u = forward_critic(params, x_unlabeled)?;
    let g_l = forward_critic(params, x_labeled)?;
    let value = mu_prime * (g_u.mean().unwrap_or(0.0) - c0 * g_l.mean().unwrap_or(0.0));
    let sf = s as f64;
    critic_backward(params, x_unlabeled, |_, _| mu_prime / sf, &mut grads, true);
    critic_backward(params, x_labeled, |_, _| -mu_prime * c0 / sf, &mut grads, true);
    Ok((grads, value))
}

/// Binary cross-entropy discriminator objective used by the H-divergence
/// ablation, `−μ (mean ln g(x_u) + mean ln(1 − g(x_l)))`, with gradient over
/// θf and θd. The critic descends it; the feature extractor ascends it.
pub fn grad_hdiv_adversarial(
    params: &NetworkParams,
    x_labeled: ArrayView2<f64>,
    x_unlabeled: ArrayView2<f64>,
    mu: f64,
) -> Result<(Gradients, f64)> {
    check_input(params, x_labeled)?;
    check_input(params, x_unlabeled)?;
    let (nl, nu) = (x_labeled.nrows(), x_unlabeled.nrows());
    if nl == 0 || nu == 0 {
        return Err(Error::Precondition("H-divergence batches must be nonempty".into()));
    }
    let g_u = forward_critic(params, x_unlabeled)?;
    let g_l = forward_critic(params, x_labeled)?;
    let value = crate::train::hdiv_adversarial_value(
        g_u.as_slice().unwrap_or(&g_u.to_vec()),
        g_l.as_slice().unwrap_or(&g_l.to_vec()),
        mu,
    );
    let mut grads = Gradients::zeros_like(params);
    if mu == 0.0 {
        return Ok((grads, value));
    }
    let (fu, fl) = (nu as f64, nl as f64);
    critic_backward(
        params,
        x_unlabeled,
        |_, g| if g < PROB_FLOOR { 0.0 } else { -mu / (fu * g) },
        &mut grads,
        true,
    );
    critic_backward(
        params,
        x_labeled,
        |_, g| if 1.0 - g < PROB_FLOOR { 0.0 } else { mu / (fl * (1.0 - g)) },
        &mut grads,
        true,
    );
    Ok((grads, value))
}

/// First-order Lipschitz-quotient penalty on paired rows of `x_labeled` and
/// `x_unlabeled`:
/// `λ · mean_pairs max(0, |g(x_u) − g(x_l)| / ‖x_u − x_l‖ − 1)²`.
/// Coincident pairs are skipped. The gradient touches θd only.
pub fn grad_lipschitz_penalty(
    params: &NetworkParams,
    x_labeled: ArrayView2<f64>,
    x_unlabeled: ArrayView2<f64>,
    lambda_lip: f64,
) -> Result<(Gradients, f64)> {
    check_input(params, x_labeled)?;
    check_input(params, x_unlabeled)?;
    let n = x_labeled.nrows();
    if n == 0 || x_unlabeled.nrows() != n {
        return Err(Error::Precondition(format!(
            "penalty needs nonempty paired batches, got {n} and {}",
            x_unlabeled.nrows()
        )));
    }
    let mut grads = Gradients::zeros_like(params);
    if lambda_lip == 0.0 {
        return Ok((grads, 0.0));
    }
    let g_l = forward_critic(params, x_labeled)?;
    let g_u = forward_critic(params, x_unlabeled)?;

    // per pair: d penalty / d g_u  (d / d g_l is its negation)
    let mut d_u = vec![0.0; n];
    let mut total = 0.0;
    let mut valid = 0usize;
    for i in 0..n {
        let dist = (&x_unlabeled.row(i) - &x_labeled.row(i)).mapv(|v| v * v).sum().sqrt();
        if dist <= COINCIDENT_EPS {
            continue;
        }
        valid += 1;
        let diff = g_u[i] - g_l[i];
        let excess = diff.abs() / dist - 1.0;
        if excess > 0.0 {
            total += excess * excess;
            d_u[i] = 2.0 * excess * diff.signum() / dist;
        }
    }
    if valid == 0 {
        return Ok((grads, 0.0));
    }
    let scale = lambda_lip / valid as f64;
    critic_backward(params, x_unlabeled, |i, _| scale * d_u[i], &mut grads, false);
    critic_backward(params, x_labeled, |i, _| -scale * d_u[i], &mut grads, false);
    Ok((grads, scale * total))
}

// ---------------------------------------------------------------------------
// Finite-difference oracle.

const GRAD_CHECK_SAMPLES: usize = 400;
const REL_ERROR_FLOOR: f64 = 1e-6;

/// Compares the analytic gradient returned by `loss_fn` against central
/// differences on a deterministic parameter subsample and returns the worst
/// relative discrepancy `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn numerical_grad_check<F>(params: &NetworkParams, loss_fn: F, epsilon: f64) -> Result<f64>
where
    F: Fn(&NetworkParams) -> Result<(f64, Gradients)>,
{
    let (loss, analytic) = loss_fn(params)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss at the base point is {loss}")));
    }
    let analytic: Vec<f64> = analytic.values().copied().collect();
    let total = params.num_params();
    if analytic.len() != total {
        return Err(Error::Shape("analytic gradient does not match parameters".into()));
    }
    let stride = total.div_ceil(GRAD_CHECK_SAMPLES).max(1);

    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for idx in (0..total).step_by(stride) {
        let original = params.values().nth(idx).copied().unwrap_or_default();
        let mut eval = |delta: f64| -> Result<f64> {
            if let Some(v) = probe.values_mut().nth(idx) {
                *v = original + delta;
            }
            let (l, _) = loss_fn(&probe)?;
            if !l.is_finite() {
                return Err(Error::NonFinite(format!("loss at parameter {idx} is {l}")));
            }
            Ok(l)
        };
        let plus = eval(epsilon)?;
        let minus = eval(-epsilon)?;
        if let Some(v) = probe.values_mut().nth(idx) {
            *v = original;
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic[idx];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        worst = worst.max(rel);
    }
    Ok(worst)
}
