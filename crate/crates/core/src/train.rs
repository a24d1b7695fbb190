//! Training: layer stacks on the autograd tape, the WGAN critic, SGD, the
//! joint task + adversarial step, and finite-difference gradient checks.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{dropout_mask, LayerSpec};
use crate::network::{Mode, NetworkSpec};
use crate::qtensor::{volume, RealTensor};
use crate::quat::{conjugate, sample_rotation_from, RotationKey};

/// Default weight-clipping bound for the critic.
pub const DEFAULT_CLIP: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub critic_lr: f64,
    pub batch: usize,
    pub critic_steps: usize,
    /// Wrong phases `R′` sampled per real sample in the adversarial term.
    pub fake_phases: usize,
    pub clip: f64,
    /// Weight of the adversarial term in the generator loss.
    pub gan_weight: f64,
    pub adversarial: bool,
    pub bn_momentum: f64,
    pub critic_hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            critic_lr: 0.1,
            batch: 32,
            critic_steps: 5,
            fake_phases: 4,
            clip: DEFAULT_CLIP,
            gan_weight: 1e4,
            adversarial: true,
            bn_momentum: 0.1,
            critic_hidden: vec![32, 16],
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.critic_lr >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if self.batch == 0 || self.fake_phases == 0 {
            return Err(Error::Config("batch size and fake phase count must be positive".into()));
        }
        if !(self.clip > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("clip must be positive and momentum in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub task_loss: f64,
    pub gan_loss: f64,
    pub total: f64,
}

impl LossReport {
    /// `step\ttask\tgan\ttotal`.
    pub fn log_line(&self) -> String {
        format!("{}\t{:.9e}\t{:.9e}\t{:.9e}", self.step, self.task_loss, self.gan_loss, self.total)
    }
}

/// `p ← p − lr·g`, then clamp to `clip` when given.
pub fn sgd_update(params: &mut [f64], grads: &[f64], lr: f64, clip: Option<(f64, f64)>) {
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
        if let Some((lo, hi)) = clip {
            *p = p.clamp(lo, hi);
        }
    }
}

/// Adam with bias correction. Call [`Adam::begin`] once per step, then
/// [`Adam::update`] for each parameter tensor with a stable index.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, moments: Vec::new(), t: 0 }
    }

    pub fn begin(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, index: usize, params: &mut [f64], grads: &[f64]) {
        if self.moments.len() <= index {
            self.moments.resize(index + 1, (Vec::new(), Vec::new()));
        }
        let (m, v) = &mut self.moments[index];
        if m.len() != params.len() {
            *m = vec![0.0; params.len()];
            *v = vec![0.0; params.len()];
        }
        let c1 = 1.0 - self.beta1.powi(self.t.max(1));
        let c2 = 1.0 - self.beta2.powi(self.t.max(1));
        for i in 0..params.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grads[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            params[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// Dropout masks and batch-norm statistics gathered while building a graph.
#[derive(Debug)]
pub struct GraphCtx {
    pub training: bool,
    pub rng: ChaCha8Rng,
    /// Batch mean-square statistics of every batch-norm layer evaluated
    /// with batch statistics, in traversal order.
    pub bn_stats: Vec<Vec<f64>>,
}

impl GraphCtx {
    pub fn new(training: bool, seed: u64) -> Self {
        GraphCtx { training, rng: ChaCha8Rng::seed_from_u64(seed), bn_stats: Vec::new() }
    }
}

/// Registers every weight of `layers` on the tape in traversal order.
pub fn register_weights(tape: &mut Tape, layers: &[LayerSpec], trainable: bool) -> Result<Vec<Var>> {
    let mut ws = Vec::new();
    for l in layers {
        l.for_each_weight(&mut |w| ws.push(w.clone()));
    }
    ws.into_iter()
        .map(|w| {
            let shape = w.shape().to_vec();
            let data = w.into_data();
            if trainable {
                tape.param(shape, data)
            } else {
                tape.constant(shape, data)
            }
        })
        .collect()
}

/// Builds `layers` on the tape for input `x` shaped `[N, planes, ...]`.
/// `weights` yields the registered weight vars in traversal order.
pub fn stack_graph(
    tape: &mut Tape,
    layers: &[LayerSpec],
    mut x: Var,
    planes: usize,
    weights: &mut std::slice::Iter<'_, Var>,
    ctx: &mut GraphCtx,
) -> Result<Var> {
    for layer in layers {
        x = match layer {
            LayerSpec::Conv { stride, pad, .. } => {
                let w = next_weight(weights)?;
                tape.conv2d(x, w, *stride, *pad)?
            }
            LayerSpec::FullyConnected { .. } => {
                let w = next_weight(weights)?;
                let flat = flatten(tape, x)?;
                tape.linear(flat, w)?
            }
            LayerSpec::Flatten => flatten(tape, x)?,
            LayerSpec::QRelu { c } => tape.qrelu(x, planes, *c)?,
            LayerSpec::QBatchNorm { eps, running } => match running {
                Some(stats) if !ctx.training => {
                    let scale = stats.data().iter().map(|m| 1.0 / (m + eps).sqrt()).collect();
                    tape.scale_elements(x, planes, scale)?
                }
                _ => {
                    let (y, ms) = tape.batch_norm(x, planes, *eps)?;
                    ctx.bn_stats.push(ms);
                    y
                }
            },
            LayerSpec::MaxPool { window, stride } => tape.max_pool(x, planes, *window, *stride)?,
            LayerSpec::AvgPool { window, stride } => tape.avg_pool(x, *window, *stride)?,
            LayerSpec::Dropout { rate } => {
                if ctx.training && *rate > 0.0 {
                    let s = tape.shape(x).to_vec();
                    let (n, m) = (s[0], volume(&s[2..]));
                    let mut full = Vec::with_capacity(n * planes * m);
                    for _ in 0..n {
                        let mask = dropout_mask(m, *rate, &mut ctx.rng);
                        for _ in 0..planes {
                            full.extend_from_slice(&mask);
                        }
                    }
                    tape.mul_const(x, full)?
                } else {
                    x
                }
            }
            LayerSpec::Residual { inner } => {
                let branch = stack_graph(tape, inner, x, planes, weights, ctx)?;
                tape.add(x, branch)?
            }
            LayerSpec::Relu => tape.relu(x),
            LayerSpec::Sigmoid => tape.sigmoid(x),
            LayerSpec::Upsample { factor } => tape.upsample(x, *factor)?,
            LayerSpec::Softmax => {
                return Err(Error::Config("softmax is fused into the loss and cannot appear inside a trained graph".into()))
            }
        };
    }
    Ok(x)
}

fn next_weight(weights: &mut std::slice::Iter<'_, Var>) -> Result<Var> {
    weights.next().copied().ok_or_else(|| Error::Autograd("weight registry exhausted".into()))
}

fn flatten(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    tape.reshape(x, vec![s[0], s[1], volume(&s[2..])])
}

/// A decoder stack with a trailing softmax removed, so the graph yields
/// logits.
fn without_softmax(layers: &[LayerSpec]) -> &[LayerSpec] {
    match layers.last() {
        Some(LayerSpec::Softmax) => &layers[..layers.len() - 1],
        _ => layers,
    }
}

/// The WGAN critic `D`: flatten, hidden layer, ReLU, scalar output.
#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    pub layers: Vec<LayerSpec>,
}

impl Critic {
    /// Uniform initialisation inside `[−clip, clip]`, one ReLU layer per
    /// entry of `hidden`.
    pub fn new(input_len: usize, hidden: &[usize], clip: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Critic::build(input_len, hidden, |shape, _| RealTensor::from_fn(shape, |_| rng.random_range(-clip..clip)))
    }

    /// He-normal initialisation with one ReLU layer per entry of
    /// `hidden`, for discriminators trained without clipping.
    pub fn he(input_len: usize, hidden: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Critic::build(input_len, hidden, |shape, fan_in| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            RealTensor::from_fn(shape, |_| normal.sample(&mut rng))
        })
    }

    fn build(input_len: usize, hidden: &[usize], mut init: impl FnMut(Vec<usize>, usize) -> RealTensor<f64>) -> Self {
        let mut layers = vec![LayerSpec::Flatten];
        let mut fan_in = input_len;
        for &h in hidden.iter().chain(&[1]) {
            layers.push(LayerSpec::FullyConnected { weight: init(vec![h, fan_in], fan_in) });
            layers.push(LayerSpec::Relu);
            fan_in = h;
        }
        layers.pop();
        Critic { layers }
    }

    /// Hidden pre-activations `W₁ v` of each plane. Because the first layer
    /// is linear, the hidden pre-activation of a mixture `Σ m_p v_p` is
    /// `Σ m_p W₁ v_p`.
    pub fn project_planes(&self, planes: &[&[f64]]) -> Vec<Vec<f64>> {
        let LayerSpec::FullyConnected { weight: w1 } = &self.layers[1] else { unreachable!("critic layout is fixed") };
        let hidden = w1.shape()[0];
        planes
            .iter()
            .map(|v| {
                let mut out = vec![0.0; hidden];
                crate::kernels::matvec(w1.data(), v, &mut out);
                out
            })
            .collect()
    }

    /// Score of the mixture with coefficients `m` of projected planes.
    pub fn score_projected(&self, projected: &[Vec<f64>], m: &[f64]) -> f64 {
        let mut h: Vec<f64> = (0..projected[0].len()).map(|i| projected.iter().zip(m).map(|(u, c)| c * u[i]).sum()).collect();
        for layer in &self.layers[2..] {
            match layer {
                LayerSpec::Relu => h.iter_mut().for_each(|v| *v = v.max(0.0)),
                LayerSpec::FullyConnected { weight } => {
                    let mut out = vec![0.0; weight.shape()[0]];
                    crate::kernels::matvec(weight.data(), &h, &mut out);
                    h = out;
                }
                _ => unreachable!("critic layout is fixed"),
            }
        }
        h[0]
    }

    pub fn input_len(&self) -> usize {
        match &self.layers[1] {
            LayerSpec::FullyConnected { weight } => weight.shape()[1],
            _ => 0,
        }
    }

    /// Critic scores of a batch of features.
    pub fn score(&self, feats: &[RealTensor<f64>]) -> Result<Vec<f64>> {
        if feats.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let ws = register_weights(&mut tape, &self.layers, false)?;
        let x = stack_features(&mut tape, feats)?;
        let y = stack_graph(&mut tape, &self.layers, x, 1, &mut ws.iter(), &mut GraphCtx::new(false, 0))?;
        Ok(tape.value(y).to_vec())
    }

    pub fn weights_mut(&mut self) -> Vec<&mut RealTensor<f64>> {
        self.layers
            .iter_mut()
            .filter_map(|l| match l {
                LayerSpec::FullyConnected { weight } => Some(weight),
                _ => None,
            })
            .collect()
    }
}

/// Stacks same-shaped tensors into a `[N, 1, ...]` constant.
pub(crate) fn stack_features(tape: &mut Tape, feats: &[RealTensor<f64>]) -> Result<Var> {
    let shape0 = feats[0].shape().to_vec();
    let mut data = Vec::with_capacity(feats.len() * feats[0].len());
    for f in feats {
        if f.shape() != shape0.as_slice() {
            return Err(Error::ShapeMismatch("batch members differ in shape".into()));
        }
        data.extend_from_slice(f.data());
    }
    let mut shape = vec![feats.len(), 1];
    shape.extend(shape0);
    tape.constant(shape, data)
}

/// Critic objective `mean_k [D(a_k) − mean_{R′} D(a′_k)]` from scores.
/// `fake[k]` holds the scores of the wrong-phase decryptions of sample k.
pub fn wgan_objective(real: &[f64], fake: &[Vec<f64>]) -> Result<f64> {
    if real.is_empty() || fake.len() != real.len() || fake.iter().any(Vec::is_empty) {
        return Err(Error::Empty("fake phase set"));
    }
    let total: f64 = real
        .iter()
        .zip(fake)
        .map(|(r, fs)| r - fs.iter().sum::<f64>() / fs.len() as f64)
        .sum();
    Ok(total / real.len() as f64)
}

/// `(d_loss, g_loss)`: the critic minimises the negated objective, the
/// encoder minimises the objective itself.
pub fn wgan_losses(critic: &Critic, a: &[RealTensor<f64>], fakes: &[Vec<RealTensor<f64>>]) -> Result<(f64, f64)> {
    let real = critic.score(a)?;
    let fake: Vec<Vec<f64>> = fakes.iter().map(|fs| critic.score(fs)).collect::<Result<_>>()?;
    let obj = wgan_objective(&real, &fake)?;
    Ok((-obj, obj))
}

/// The per-sample randomness of one step: keys, wrong phases and fooling
/// partners.
#[derive(Debug, Clone)]
pub struct StepPlan {
    pub keys: Vec<RotationKey>,
    /// `fakes[f][k]` is the wrong phase `R′` of sample `k` in round `f`.
    pub fakes: Vec<Vec<RotationKey>>,
    pub fool1: Vec<usize>,
    pub fool2: Vec<usize>,
    pub dropout_seed: u64,
}

fn other_index(rng: &mut ChaCha8Rng, n: usize, k: usize) -> usize {
    if n < 2 {
        return k;
    }
    let j = rng.random_range(0..n - 1);
    if j >= k {
        j + 1
    } else {
        j
    }
}

/// A key different from `key`, resampled on the (measure-zero) collision.
fn wrong_phase(rng: &mut ChaCha8Rng, key: &RotationKey) -> RotationKey {
    loop {
        let k = sample_rotation_from(rng);
        if k != *key {
            return k;
        }
    }
}

impl StepPlan {
    pub fn sample(n: usize, fake_phases: usize, rng: &mut ChaCha8Rng) -> Self {
        let keys: Vec<RotationKey> = (0..n).map(|_| sample_rotation_from(rng)).collect();
        let fakes = (0..fake_phases).map(|_| keys.iter().map(|k| wrong_phase(rng, k)).collect()).collect();
        let fool1 = (0..n).map(|k| other_index(rng, n, k)).collect();
        let fool2 = (0..n).map(|k| other_index(rng, n, k)).collect();
        StepPlan { keys, fakes, fool1, fool2, dropout_seed: rng.random() }
    }

    fn rotation_mats(&self) -> Result<Vec<[[f64; 4]; 4]>> {
        self.keys.iter().map(|k| Ok(k.rotor()?.conjugation_matrix())).collect()
    }

    fn inverse_mats(&self) -> Result<Vec<[[f64; 4]; 4]>> {
        self.keys.iter().map(|k| Ok(conjugate(k.rotor()?).conjugation_matrix())).collect()
    }

    /// Matrices taking the unrotated `x` to `R̄′ R x R̄ R′` for round `f`.
    fn fake_mats(&self, f: usize) -> Result<Vec<[[f64; 4]; 4]>> {
        self.keys
            .iter()
            .zip(&self.fakes[f])
            .map(|(k, w)| Ok((conjugate(w.rotor()?) * k.rotor()?).conjugation_matrix()))
            .collect()
    }
}

/// Node handles of one forward pass of the split network.
pub struct NetGraph {
    pub weights: Vec<Var>,
    /// Encoder output `a`, shaped `[N, C, H, W]`.
    pub a: Var,
    /// `0 + a i + b j + c k` before rotation (QNN mode).
    pub lifted: Option<Var>,
    pub logits: Var,
    pub bn_stats: Vec<Vec<f64>>,
}

/// Builds encoder → (encrypt → processing → decrypt) → decoder logits.
pub fn network_graph(
    tape: &mut Tape,
    net: &NetworkSpec,
    images: &[RealTensor<f64>],
    plan: &StepPlan,
    training: bool,
    trainable: bool,
) -> Result<NetGraph> {
    let n = images.len();
    let mut weights = register_weights(tape, &net.encoder, trainable)?;
    weights.extend(register_weights(tape, &net.processing, trainable)?);
    weights.extend(register_weights(tape, &net.decoder, trainable)?);
    let mut ctx = GraphCtx::new(training, plan.dropout_seed);
    let mut it = weights.iter();
    let input = stack_features(tape, images)?;
    let enc = stack_graph(tape, &net.encoder, input, 1, &mut it, &mut ctx)?;
    let feat_shape = tape.shape(enc)[2..].to_vec();
    let mut a_shape = vec![n];
    a_shape.extend(&feat_shape);
    let a = tape.reshape(enc, a_shape)?;
    let (h, lifted) = match net.mode {
        Mode::Qnn => {
            let b = tape.gather(a, plan.fool1.clone())?;
            let c = tape.gather(a, plan.fool2.clone())?;
            let x = tape.lift(a, b, c)?;
            let f = tape.rotate(x, plan.rotation_mats()?)?;
            let h = stack_graph(tape, &net.processing, f, 4, &mut it, &mut ctx)?;
            let back = tape.rotate(h, plan.inverse_mats()?)?;
            let plane = tape.select_plane(back, 4, 1)?;
            let mut s = tape.shape(plane).to_vec();
            s.insert(1, 1);
            (tape.reshape(plane, s)?, Some(x))
        }
        Mode::Real => (stack_graph(tape, &net.processing, enc, 1, &mut it, &mut ctx)?, None),
    };
    let out = stack_graph(tape, without_softmax(&net.decoder), h, 1, &mut it, &mut ctx)?;
    let logits = tape.reshape(out, vec![n, net.class_count])?;
    Ok(NetGraph { weights, a, lifted, logits, bn_stats: ctx.bn_stats })
}

/// Critic scores of `a` and of every wrong-phase decryption `a′`, as tape
/// nodes. Returns `(mean D(a), mean D(a′))`.
fn critic_terms(tape: &mut Tape, critic_weights: &[Var], critic: &Critic, a: Var, lifted: Var, plan: &StepPlan) -> Result<(Var, Var)> {
    let s = tape.shape(a).to_vec();
    let mut s1 = s.clone();
    s1.insert(1, 1);
    let mut ctx = GraphCtx::new(false, 0);
    let a1 = tape.reshape(a, s1.clone())?;
    let real = stack_graph(tape, &critic.layers, a1, 1, &mut critic_weights.iter(), &mut ctx)?;
    let real = tape.mean(real);
    let mut fake_sum: Option<Var> = None;
    for f in 0..plan.fakes.len() {
        let rotated = tape.rotate(lifted, plan.fake_mats(f)?)?;
        let plane = tape.select_plane(rotated, 4, 1)?;
        let plane = tape.reshape(plane, s1.clone())?;
        let score = stack_graph(tape, &critic.layers, plane, 1, &mut critic_weights.iter(), &mut ctx)?;
        let m = tape.mean(score);
        fake_sum = Some(match fake_sum {
            Some(acc) => tape.add(acc, m)?,
            None => m,
        });
    }
    let fake = tape.scale(fake_sum.expect("at least one fake phase"), 1.0 / plan.fakes.len() as f64);
    Ok((real, fake))
}

/// Joint trainer for the split network and its critic.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: NetworkSpec,
    pub critic: Critic,
    pub config: TrainConfig,
    rng: ChaCha8Rng,
    step: u64,
}

impl Trainer {
    pub fn new(net: NetworkSpec, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        net.validate()?;
        let feat_len = volume(&net.feature_shape()?);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let critic = Critic::new(feat_len, &config.critic_hidden, config.clip, rng.random());
        Ok(Trainer { net, critic, config, rng, step: 0 })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    fn adversarial(&self) -> bool {
        self.config.adversarial && self.net.mode == Mode::Qnn
    }

    /// Critic ascent steps with clipping, then one descent step of the
    /// encoder, processing and decoder on `task + gan_weight · g_loss`.
    pub fn train_step(&mut self, images: &[RealTensor<f64>], labels: &[usize]) -> Result<LossReport> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(Error::Empty("training batch"));
        }
        let n = images.len();
        let plan = StepPlan::sample(n, self.config.fake_phases, &mut self.rng);
        if self.adversarial() {
            self.critic_steps(images, &plan)?;
        }
        let mut tape = Tape::new();
        let g = network_graph(&mut tape, &self.net, images, &plan, true, true)?;
        let task = tape.softmax_cross_entropy(g.logits, labels)?;
        let (gan, total) = match (self.adversarial(), g.lifted) {
            (true, Some(lifted)) => {
                let cw = register_weights(&mut tape, &self.critic.layers, false)?;
                let (real, fake) = critic_terms(&mut tape, &cw, &self.critic, g.a, lifted, &plan)?;
                let obj = tape.sub(real, fake)?;
                let gan = tape.scale(obj, self.config.gan_weight);
                let total = tape.add(task, gan)?;
                (tape.scalar(gan), total)
            }
            _ => (0.0, task),
        };
        let report = LossReport { step: self.step, task_loss: tape.scalar(task), gan_loss: gan, total: tape.scalar(total) };
        if !report.total.is_finite() {
            return Err(Error::Diverged { step: self.step, loss: report.total });
        }
        tape.backward(total)?;
        let grads: Vec<Vec<f64>> = g
            .weights
            .iter()
            .map(|&w| tape.grad(w).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(w).len()]))
            .collect();
        let lr = self.config.lr;
        let mut gi = grads.iter();
        let net = &mut self.net;
        for l in net.encoder.iter_mut().chain(net.processing.iter_mut()).chain(net.decoder.iter_mut()) {
            l.for_each_weight_mut(&mut |w| sgd_update(w.data_mut(), gi.next().expect("one gradient per weight"), lr, None));
        }
        self.update_running_stats(&g.bn_stats)?;
        self.step += 1;
        Ok(report)
    }

    fn critic_steps(&mut self, images: &[RealTensor<f64>], plan: &StepPlan) -> Result<()> {
        // Encoder features are fixed during the critic's inner loop.
        let feats = self.net.encode_features(images)?;
        let mut tape = Tape::new();
        let a_var = stack_features(&mut tape, &feats)?;
        let mut a_shape = tape.shape(a_var).to_vec();
        a_shape.remove(1);
        let a_var = tape.reshape(a_var, a_shape.clone())?;
        let b = tape.gather(a_var, plan.fool1.clone())?;
        let c = tape.gather(a_var, plan.fool2.clone())?;
        let lifted = tape.lift(a_var, b, c)?;
        let a = tape.value(a_var).to_vec();
        let x = tape.value(lifted).to_vec();
        let x_shape = tape.shape(lifted).to_vec();
        let clip = self.config.clip;
        for inner in 0..self.config.critic_steps {
            let sub_plan = if inner == 0 {
                plan.clone()
            } else {
                let mut p = plan.clone();
                p.fakes = (0..plan.fakes.len())
                    .map(|_| plan.keys.iter().map(|k| wrong_phase(&mut self.rng, k)).collect())
                    .collect();
                p
            };
            let mut t = Tape::new();
            let cw = register_weights(&mut t, &self.critic.layers, true)?;
            let av = t.constant(a_shape.clone(), a.clone())?;
            let xv = t.constant(x_shape.clone(), x.clone())?;
            let (real, fake) = critic_terms(&mut t, &cw, &self.critic, av, xv, &sub_plan)?;
            let obj = t.sub(real, fake)?;
            let d_loss = t.scale(obj, -1.0);
            t.backward(d_loss)?;
            let lr = self.config.critic_lr;
            for (w, &v) in self.critic.weights_mut().into_iter().zip(&cw) {
                let grad = t.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; w.len()]);
                sgd_update(w.data_mut(), &grad, lr, Some((-clip, clip)));
            }
        }
        Ok(())
    }

    fn update_running_stats(&mut self, stats: &[Vec<f64>]) -> Result<()> {
        let m = self.config.bn_momentum;
        let mut shapes = Vec::new();
        collect_bn_shapes(&self.net, &mut shapes)?;
        let mut it = stats.iter().zip(shapes);
        let net = &mut self.net;
        for l in net.encoder.iter_mut().chain(net.processing.iter_mut()).chain(net.decoder.iter_mut()) {
            l.for_each_bn_mut(&mut |slot| {
                let Some((batch, shape)) = it.next() else { return };
                match slot {
                    Some(run) => run.data_mut().iter_mut().zip(batch).for_each(|(r, b)| *r = (1.0 - m) * *r + m * b),
                    None => *slot = RealTensor::new(shape, batch.clone()).ok(),
                }
            });
        }
        Ok(())
    }

    /// Trains for `steps` steps on random batches, writing one log line per
    /// step to `log` when given.
    pub fn fit(
        &mut self,
        images: &[RealTensor<f64>],
        labels: &[usize],
        steps: usize,
        mut log: Option<&mut dyn Write>,
    ) -> Result<Vec<LossReport>> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(Error::Empty("training set"));
        }
        let mut reports = Vec::with_capacity(steps);
        for _ in 0..steps {
            let idx: Vec<usize> = (0..self.config.batch.min(images.len())).map(|_| self.rng.random_range(0..images.len())).collect();
            let batch: Vec<RealTensor<f64>> = idx.iter().map(|&i| images[i].clone()).collect();
            let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let r = self.train_step(&batch, &ys)?;
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", r.log_line())?;
            }
            reports.push(r);
        }
        Ok(reports)
    }
}

/// Initialises running batch-norm statistics from one pass over `images`
/// so the first inference after training has stored statistics.
pub fn calibrate_batchnorm(net: &mut NetworkSpec, images: &[RealTensor<f64>], seed: u64) -> Result<()> {
    if images.is_empty() {
        return Err(Error::Empty("calibration set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = StepPlan::sample(images.len(), 1, &mut rng);
    let mut probe = net.clone();
    for l in probe.encoder.iter_mut().chain(probe.processing.iter_mut()).chain(probe.decoder.iter_mut()) {
        l.for_each_bn_mut(&mut |slot| *slot = None);
    }
    let mut tape = Tape::new();
    let g = network_graph(&mut tape, &probe, images, &plan, false, false)?;
    let mut it = g.bn_stats.into_iter();
    let mut shapes = Vec::new();
    collect_bn_shapes(net, &mut shapes)?;
    let mut sit = shapes.into_iter();
    for l in net.encoder.iter_mut().chain(net.processing.iter_mut()).chain(net.decoder.iter_mut()) {
        l.for_each_bn_mut(&mut |slot| {
            if let (Some(stats), Some(shape)) = (it.next(), sit.next()) {
                *slot = RealTensor::new(shape, stats).ok();
            }
        });
    }
    Ok(())
}

/// Input shapes (per plane) of every batch-norm layer in traversal order.
fn collect_bn_shapes(net: &NetworkSpec, out: &mut Vec<Vec<usize>>) -> Result<()> {
    fn walk(layers: &[LayerSpec], mut shape: Vec<usize>, out: &mut Vec<Vec<usize>>) -> Result<Vec<usize>> {
        for l in layers {
            match l {
                LayerSpec::QBatchNorm { .. } => out.push(shape.clone()),
                LayerSpec::Residual { inner } => {
                    walk(inner, shape.clone(), out)?;
                }
                _ => {}
            }
            shape = l.output_shape(&shape)?;
        }
        Ok(shape)
    }
    let s = walk(&net.encoder, net.input_shape.clone(), out)?;
    let s = walk(&net.processing, s, out)?;
    walk(&net.decoder, s, out)?;
    Ok(())
}

/// Held-out accuracy through the full encrypted path, with a fresh key and
/// fooling partners per sample.
pub fn evaluate_accuracy(net: &NetworkSpec, images: &[RealTensor<f64>], labels: &[usize], seed: u64) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut correct = 0usize;
    for chunk in (0..images.len()).collect::<Vec<_>>().chunks(64) {
        let batch: Vec<RealTensor<f64>> = chunk.iter().map(|&i| images[i].clone()).collect();
        let plan = StepPlan::sample(batch.len(), 1, &mut rng);
        let mut tape = Tape::new();
        let g = network_graph(&mut tape, net, &batch, &plan, false, false)?;
        let logits = tape.value(g.logits);
        for (r, &i) in chunk.iter().enumerate() {
            let row = &logits[r * net.class_count..(r + 1) * net.class_count];
            if argmax(row) == labels[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / images.len() as f64)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Gradient-check result for one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Probes whose `±h` evaluations crossed a kink or tie.
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.max_rel_err <= self.tolerance)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }
}

/// Relative error with a floor for near-zero gradients.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7)
}

/// Central-difference check of one scalar function of a flat parameter
/// vector. `eval` returns the loss and the branch signature of the pass.
/// Probes are skipped when either side's signature differs from the base.
pub fn check_block(
    name: &str,
    x0: &[f64],
    analytic: &[f64],
    indices: &[usize],
    step: f64,
    mut eval: impl FnMut(&[f64]) -> (f64, Vec<u32>),
) -> BlockCheck {
    let (_, base_sig) = eval(x0);
    let mut x = x0.to_vec();
    let mut out = BlockCheck { name: name.to_string(), max_rel_err: 0.0, checked: 0, excluded: 0 };
    for &i in indices {
        x[i] = x0[i] + step;
        let (up, sig_up) = eval(&x);
        x[i] = x0[i] - step;
        let (down, sig_down) = eval(&x);
        x[i] = x0[i];
        if sig_up != base_sig || sig_down != base_sig {
            out.excluded += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * step);
        out.max_rel_err = out.max_rel_err.max(relative_error(analytic[i], numeric));
        out.checked += 1;
    }
    out
}

fn probe_indices(len: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    (0..max).map(|_| rng.random_range(0..len)).collect()
}

/// Finite-difference check of the task loss of `net` with respect to every
/// weight block (up to `per_block` probes each), through encryption and
/// decryption with keys drawn from `seed`.
pub fn finite_diff_check(
    net: &NetworkSpec,
    images: &[RealTensor<f64>],
    labels: &[usize],
    seed: u64,
    step: f64,
    tolerance: f64,
    per_block: usize,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = StepPlan::sample(images.len(), 1, &mut rng);
    let loss_of = |n: &NetworkSpec| -> Result<(f64, Vec<u32>, Tape, NetGraph, Var)> {
        let mut tape = Tape::new();
        let g = network_graph(&mut tape, n, images, &plan, true, true)?;
        let l = tape.softmax_cross_entropy(g.logits, labels)?;
        Ok((tape.scalar(l), tape.branch_signature().to_vec(), tape, g, l))
    };
    let (_, _, mut tape, g, l) = loss_of(net)?;
    tape.backward(l)?;
    let n_blocks = g.weights.len();
    let mut blocks = Vec::with_capacity(n_blocks);
    for b in 0..n_blocks {
        let x0 = tape.value(g.weights[b]).to_vec();
        let analytic = tape.grad(g.weights[b]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x0.len()]);
        let idx = probe_indices(x0.len(), per_block, &mut rng);
        let check = check_block(&format!("weight[{b}]"), &x0, &analytic, &idx, step, |x| {
            let mut probe = net.clone();
            set_weight_block(&mut probe, b, x);
            match loss_of(&probe) {
                Ok((v, sig, ..)) => (v, sig),
                Err(_) => (f64::NAN, Vec::new()),
            }
        });
        blocks.push(check);
    }
    Ok(GradCheckReport { blocks, tolerance })
}

fn set_weight_block(net: &mut NetworkSpec, block: usize, values: &[f64]) {
    let mut i = 0;
    for l in net.encoder.iter_mut().chain(net.processing.iter_mut()).chain(net.decoder.iter_mut()) {
        l.for_each_weight_mut(&mut |w| {
            if i == block {
                w.data_mut().copy_from_slice(values);
            }
            i += 1;
        });
    }
}

/// Finite-difference check of a single layer: gradients of a random linear
/// probe of its output with respect to its input and to each weight.
/// `input_shape` excludes the batch and plane axes.
pub fn layer_gradcheck(
    layer: &LayerSpec,
    input_shape: &[usize],
    planes: usize,
    batch: usize,
    seed: u64,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = vec![batch, planes];
    shape.extend(input_shape);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let x0: Vec<f64> = (0..volume(&shape)).map(|_| normal.sample(&mut rng)).collect();
    let dropout_seed: u64 = rng.random();
    let build = |tape: &mut Tape, xv: &[f64], weights: Option<(usize, &[f64])>, x_param: bool| -> Result<(Var, Vec<Var>, Var)> {
        let mut l = layer.clone();
        if let Some((b, v)) = weights {
            let mut i = 0;
            l.for_each_weight_mut(&mut |w| {
                if i == b {
                    w.data_mut().copy_from_slice(v);
                }
                i += 1;
            });
        }
        let ws = register_weights(tape, std::slice::from_ref(&l), true)?;
        let x = if x_param { tape.param(shape.clone(), xv.to_vec())? } else { tape.constant(shape.clone(), xv.to_vec())? };
        let mut ctx = GraphCtx::new(true, dropout_seed);
        let y = stack_graph(tape, std::slice::from_ref(&l), x, planes, &mut ws.iter(), &mut ctx)?;
        Ok((x, ws, y))
    };
    let out_len = {
        let mut t = Tape::new();
        let (_, _, y) = build(&mut t, &x0, None, false)?;
        t.value(y).len()
    };
    let probe: Vec<f64> = (0..out_len).map(|_| normal.sample(&mut rng)).collect();
    let loss = |tape: &mut Tape, y: Var| -> Result<Var> {
        let r = tape.mul_const(y, probe.clone())?;
        Ok(tape.sum(r))
    };
    let mut tape = Tape::new();
    let (x, ws, y) = build(&mut tape, &x0, None, true)?;
    let l = loss(&mut tape, y)?;
    tape.backward(l)?;
    let eval_with = |xv: &[f64], w: Option<(usize, &[f64])>| -> (f64, Vec<u32>) {
        let mut t = Tape::new();
        let r = build(&mut t, xv, w, false).and_then(|(_, _, y)| loss(&mut t, y));
        match r {
            Ok(l) => (t.scalar(l), t.branch_signature().to_vec()),
            Err(_) => (f64::NAN, Vec::new()),
        }
    };
    let mut blocks = Vec::new();
    let gx = tape.grad(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x0.len()]);
    let idx: Vec<usize> = (0..x0.len()).collect();
    blocks.push(check_block("input", &x0, &gx, &idx, step, |xv| eval_with(xv, None)));
    for (b, &w) in ws.iter().enumerate() {
        let w0 = tape.value(w).to_vec();
        let gw = tape.grad(w).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; w0.len()]);
        let idx = probe_indices(w0.len(), 64, &mut rng);
        blocks.push(check_block(&format!("weight[{b}]"), &w0, &gw, &idx, step, |wv| eval_with(&x0, Some((b, wv)))));
    }
    Ok(GradCheckReport { blocks, tolerance })
}
