//! Attackers against encrypted features and the privacy metrics used to
//! score them.

use std::f64::consts::TAU;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::Tape;
use crate::data::{LabeledImage, ATTR_QUADRANT};
use crate::error::{Error, Result};
use crate::layers::LayerSpec;
use crate::network::{decrypt_plane, encrypt_features, NetworkSpec};
use crate::qtensor::{QTensor, RealTensor};
use crate::quat::{angle_between, conjugate, rotate, sample_rotation_from, Quaternion, RotationKey};
use crate::train::{register_weights, stack_features, Adam, stack_graph, Critic, GraphCtx};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankMode {
    Quaternion,
    Complex,
}

/// Estimated number of equally plausible reconstructions for a phase error
/// `dtheta`: `2 / (1 − cos Δθ)` for quaternion features, `2π / Δθ` for
/// complex ones. Infinite at `Δθ = 0`.
pub fn anonymity_rank(dtheta: f64, mode: RankMode) -> f64 {
    if dtheta <= 0.0 {
        return f64::INFINITY;
    }
    match mode {
        RankMode::Quaternion => 2.0 / (1.0 - dtheta.cos()),
        RankMode::Complex => TAU / dtheta,
    }
}

/// Angle between the target phases `R* i R̄*` and `R̂ i R̂̄`, in `[0, π]`.
pub fn delta_theta(true_key: &RotationKey, est: &RotationKey) -> Result<f64> {
    let u = rotate(true_key.rotor()?, Quaternion::I)?.vector();
    let v = rotate(est.rotor()?, Quaternion::I)?.vector();
    Ok(angle_between(u, v))
}

/// Mean absolute per-pixel difference.
pub fn reconstruction_error(recon: &RealTensor<f64>, image: &RealTensor<f64>) -> Result<f64> {
    if recon.shape() != image.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", recon.shape(), image.shape())));
    }
    if image.is_empty() {
        return Err(Error::Empty("image"));
    }
    Ok(recon.data().iter().zip(image.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / image.len() as f64)
}

/// One guessed phase with its discriminator score and decryption.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePhase {
    pub key: RotationKey,
    pub score: f64,
    pub decrypted: RealTensor<f64>,
}

/// Candidate key `index` of an enumeration seeded with `seed`. Each index
/// owns its own ChaCha stream, so results do not depend on scheduling.
pub fn candidate_key(seed: u64, index: u64) -> RotationKey {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    sample_rotation_from(&mut rng)
}

/// Coefficients of `(f_i, f_j, f_k)` in `Im_i(R̄′ f R′)`.
fn decrypt_coeffs(key: &RotationKey) -> Result<[f64; 3]> {
    let m = conjugate(key.rotor()?).conjugation_matrix();
    Ok([m[1][1], m[1][2], m[1][3]])
}

/// Highest score wins; ties go to the lower candidate index.
fn best_of(a: (f64, u64), b: (f64, u64)) -> (f64, u64) {
    let a_nan = a.0.is_nan();
    let b_nan = b.0.is_nan();
    match (a_nan, b_nan) {
        (true, false) => b,
        (false, true) => a,
        _ if a.0 > b.0 || (a.0 == b.0 && a.1 < b.1) => a,
        _ if b.0 > a.0 => b,
        _ => {
            if a.1 <= b.1 {
                a
            } else {
                b
            }
        }
    }
}

/// Samples `n` candidate phases, decrypts `f` with each and returns the one
/// `score` rates highest.
pub fn phase_enumeration_with(
    f: &QTensor<f64>,
    n: usize,
    seed: u64,
    score: impl Fn(&RotationKey, &RealTensor<f64>) -> f64 + Sync,
) -> Result<CandidatePhase> {
    if n == 0 {
        return Err(Error::Config("candidate count must be at least 1".into()));
    }
    let (best_score, best) = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let key = candidate_key(seed, i);
            let s = decrypt_plane(f, &key).map(|a| score(&key, &a)).unwrap_or(f64::NAN);
            (s, i)
        })
        .reduce(|| (f64::NAN, u64::MAX), best_of);
    let key = candidate_key(seed, best);
    Ok(CandidatePhase { decrypted: decrypt_plane(f, &key)?, key, score: best_score })
}

/// [`phase_enumeration_with`] scored by a trained discriminator, using the
/// linearity of its first layer so each candidate costs one small mixture.
pub fn phase_enumeration_attack(f: &QTensor<f64>, disc: &Critic, n: usize, seed: u64) -> Result<CandidatePhase> {
    if n == 0 {
        return Err(Error::Config("candidate count must be at least 1".into()));
    }
    let projected = disc.project_planes(&[f.plane(1), f.plane(2), f.plane(3)]);
    let (best_score, best) = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let key = candidate_key(seed, i);
            let s = decrypt_coeffs(&key).map(|m| disc.score_projected(&projected, &m)).unwrap_or(f64::NAN);
            (s, i)
        })
        .reduce(|| (f64::NAN, u64::MAX), best_of);
    let key = candidate_key(seed, best);
    Ok(CandidatePhase { decrypted: decrypt_plane(f, &key)?, key, score: best_score })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig { steps: 600, batch: 32, lr: 0.002, hidden: vec![32, 16], seed: 0 }
    }
}

/// Random-phase decryption `m₁ a + m₂ b + m₃ c` of the lifted `(a, b, c)`.
fn mix(coeffs: [f64; 3], a: &RealTensor<f64>, b: &RealTensor<f64>, c: &RealTensor<f64>) -> RealTensor<f64> {
    let data = a.data().iter().zip(b.data()).zip(c.data()).map(|((x, y), z)| coeffs[0] * x + coeffs[1] * y + coeffs[2] * z).collect();
    RealTensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn random_other(rng: &mut ChaCha8Rng, n: usize, k: usize) -> usize {
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

/// Trains `D′` to tell true-phase features `g(I)` (label 1) from
/// wrong-phase decryptions (label 0) with binary cross-entropy.
pub fn train_phase_discriminator(feats: &[RealTensor<f64>], cfg: &DiscriminatorConfig) -> Result<Critic> {
    if feats.is_empty() {
        return Err(Error::Empty("discriminator training set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut disc = Critic::he(feats[0].len(), &cfg.hidden, rng.random());
    let mut opt = Adam::new(cfg.lr);
    let n = feats.len();
    for _ in 0..cfg.steps {
        let mut batch = Vec::with_capacity(2 * cfg.batch);
        let mut targets = Vec::with_capacity(2 * cfg.batch);
        for _ in 0..cfg.batch {
            let k = rng.random_range(0..n);
            batch.push(feats[k].clone());
            targets.push(1.0);
            let q = sample_rotation_from(&mut rng);
            let m = decrypt_coeffs(&q)?;
            let (j, l) = (random_other(&mut rng, n, k), random_other(&mut rng, n, k));
            batch.push(mix(m, &feats[k], &feats[j], &feats[l]));
            targets.push(0.0);
        }
        let mut tape = Tape::new();
        let ws = register_weights(&mut tape, &disc.layers, true)?;
        let x = stack_features(&mut tape, &batch)?;
        let y = stack_graph(&mut tape, &disc.layers, x, 1, &mut ws.iter(), &mut GraphCtx::new(false, 0))?;
        let loss = tape.bce_with_logits(y, targets)?;
        tape.backward(loss)?;
        opt.begin();
        for (i, (w, &v)) in disc.weights_mut().into_iter().zip(&ws).enumerate() {
            if let Some(g) = tape.grad(v) {
                opt.update(i, w.data_mut(), g);
            }
        }
    }
    Ok(disc)
}

/// What an inversion network sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InversionMode {
    /// A decrypted real feature `a′`.
    Decrypted,
    /// All four planes of the encrypted feature, stacked as channels.
    Raw,
}

/// Four planes of `[C, H, W]` as one `[4C, H, W]` tensor.
pub fn raw_input(f: &QTensor<f64>) -> Result<RealTensor<f64>> {
    let s = f.shape();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch(format!("raw attacker needs [C, H, W] features, got {s:?}")));
    }
    let mut data = Vec::with_capacity(4 * f.len());
    for p in 0..4 {
        data.extend_from_slice(f.plane(p));
    }
    RealTensor::new(vec![4 * s[0], s[1], s[2]], data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig { steps: 1000, batch: 16, lr: 0.01, hidden: 8, seed: 0 }
    }
}

/// A small convolutional decoder from features back to images.
#[derive(Debug, Clone, PartialEq)]
pub struct Inverter {
    pub mode: InversionMode,
    /// Ends in a sigmoid, so outputs lie in `[0, 1]`.
    pub layers: Vec<LayerSpec>,
}

impl Inverter {
    pub fn in_channels(&self) -> usize {
        match &self.layers[0] {
            LayerSpec::Conv { weight, .. } => weight.shape()[1],
            _ => 0,
        }
    }

    pub fn reconstruct(&self, feats: &[RealTensor<f64>]) -> Result<Vec<RealTensor<f64>>> {
        crate::layers::forward_real(&self.layers, feats.to_vec(), &mut crate::layers::ForwardCtx::inference())
    }
}

/// Trains an inverter on `(feature, image)` pairs. Three 3×3 convolutions,
/// with nearest-neighbour upsampling after the first when features are
/// smaller than images.
pub fn inversion_attack_train(
    feats: &[RealTensor<f64>],
    images: &[RealTensor<f64>],
    mode: InversionMode,
    cfg: &InversionConfig,
) -> Result<Inverter> {
    if feats.is_empty() || feats.len() != images.len() {
        return Err(Error::Empty("inversion training set"));
    }
    let fs = feats[0].shape();
    let is = images[0].shape();
    if fs.len() != 3 || is.len() != 3 || !is[1].is_multiple_of(fs[1]) {
        return Err(Error::ShapeMismatch(format!("features {fs:?} cannot be inverted to images {is:?}")));
    }
    let factor = is[1] / fs[1];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let h = cfg.hidden;
    let conv = |o: usize, i: usize, rng: &mut ChaCha8Rng| {
        let std = (2.0 / (i * 9) as f64).sqrt();
        let normal = rand_distr::Normal::new(0.0, std).expect("positive std");
        LayerSpec::Conv { weight: RealTensor::from_fn(vec![o, i, 3, 3], |_| rand_distr::Distribution::sample(&normal, rng)), stride: 1, pad: 1 }
    };
    let mut layers = vec![conv(h, fs[0], &mut rng), LayerSpec::Relu];
    if factor > 1 {
        layers.push(LayerSpec::Upsample { factor });
    }
    layers.extend([conv(h, h, &mut rng), LayerSpec::Relu, conv(is[0], h, &mut rng)]);
    let n = feats.len();
    let mut opt = Adam::new(cfg.lr);
    for _ in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..n)).collect();
        let xb: Vec<RealTensor<f64>> = idx.iter().map(|&i| feats[i].clone()).collect();
        let targets: Vec<f64> = idx.iter().flat_map(|&i| images[i].data().iter().copied()).collect();
        let mut tape = Tape::new();
        let ws = register_weights(&mut tape, &layers, true)?;
        let x = stack_features(&mut tape, &xb)?;
        let logits = stack_graph(&mut tape, &layers, x, 1, &mut ws.iter(), &mut GraphCtx::new(false, 0))?;
        let loss = tape.bce_with_logits(logits, targets)?;
        tape.backward(loss)?;
        let grads: Vec<Vec<f64>> = ws.iter().map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default()).collect();
        let mut i = 0;
        opt.begin();
        for l in layers.iter_mut() {
            l.for_each_weight_mut(&mut |w| {
                if !grads[i].is_empty() {
                    opt.update(i, w.data_mut(), &grads[i]);
                }
                i += 1;
            });
        }
    }
    layers.push(LayerSpec::Sigmoid);
    Ok(Inverter { mode, layers })
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-nearest-neighbour attribute prediction by Euclidean distance.
/// Majority vote; a tied vote goes to the tied label whose member is
/// nearest.
pub fn knn_predict(train: &[RealTensor<f64>], attrs: &[usize], queries: &[RealTensor<f64>], k: usize) -> Result<Vec<usize>> {
    if train.is_empty() || train.len() != attrs.len() {
        return Err(Error::Empty("k-NN training set"));
    }
    if k == 0 || k > train.len() {
        return Err(Error::Config(format!("k must be in 1..={}, got {k}", train.len())));
    }
    let labels = attrs.iter().max().map_or(0, |m| m + 1);
    Ok(queries
        .par_iter()
        .map(|q| {
            let mut d: Vec<(f64, usize)> = train.iter().enumerate().map(|(i, t)| (squared_distance(q.data(), t.data()), i)).collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut votes = vec![0usize; labels];
            for &(_, i) in &d[..k] {
                votes[attrs[i]] += 1;
            }
            let top = *votes.iter().max().expect("at least one label");
            d[..k].iter().map(|&(_, i)| attrs[i]).find(|&l| votes[l] == top).expect("winner among neighbours")
        })
        .collect())
}

/// Predictions and accuracy of k-NN attribute inference.
pub fn knn_property_inference(
    train: &[RealTensor<f64>],
    attrs: &[usize],
    queries: &[RealTensor<f64>],
    query_attrs: &[usize],
    k: usize,
) -> Result<(Vec<usize>, f64)> {
    let pred = knn_predict(train, attrs, queries, k)?;
    if queries.is_empty() {
        return Ok((pred, 0.0));
    }
    let acc = pred.iter().zip(query_attrs).filter(|(p, t)| p == t).count() as f64 / queries.len() as f64;
    Ok((pred, acc))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    /// Protected test features attacked.
    pub n_features: usize,
    pub n_candidates: usize,
    /// Attacker's labelled set size for k-NN.
    pub knn_train: usize,
    pub k_values: Vec<usize>,
    /// Attribute index targeted by k-NN.
    pub attribute: usize,
    pub discriminator: DiscriminatorConfig,
    pub inverter: InversionConfig,
    /// Also train the raw-payload inverter.
    pub raw_attacker: bool,
    pub seed: u64,
    /// Worker threads for candidate scoring; 0 uses the global pool.
    pub workers: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n_features: 100,
            n_candidates: 1000,
            knn_train: 400,
            k_values: vec![1, 3, 5],
            attribute: ATTR_QUADRANT,
            discriminator: DiscriminatorConfig::default(),
            inverter: InversionConfig::default(),
            raw_attacker: true,
            seed: 0,
            workers: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnRow {
    pub k: usize,
    pub protected: f64,
    pub plain: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackReport {
    pub delta_theta_mean: f64,
    pub delta_theta_std: f64,
    pub rank_qnn: f64,
    pub rank_complex_mode: f64,
    pub recon_error_true_key: f64,
    pub recon_error_attacker: f64,
    /// Second attacker, reading the raw encrypted payload.
    pub recon_error_raw: Option<f64>,
    /// k-NN accuracy on attacker-decrypted features at the first `k`.
    pub inference_accuracy: f64,
    pub knn: Vec<KnnRow>,
    pub n_trials: usize,
    pub seed: u64,
    /// Per-feature phase errors, in attack order.
    pub delta_thetas: Vec<f64>,
}

impl AttackReport {
    /// Range checks on every probability, error and rank.
    pub fn check_invariants(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} is outside [0, 1]")))
            }
        };
        unit("recon_error_true_key", self.recon_error_true_key)?;
        unit("recon_error_attacker", self.recon_error_attacker)?;
        if let Some(r) = self.recon_error_raw {
            unit("recon_error_raw", r)?;
        }
        unit("inference_accuracy", self.inference_accuracy)?;
        for row in &self.knn {
            unit("knn accuracy", row.protected)?;
            unit("knn accuracy", row.plain)?;
        }
        if self.delta_theta_mean > 0.0 && self.delta_theta_mean <= std::f64::consts::PI && (self.rank_qnn < 1.0 || self.rank_complex_mode < 1.0) {
            return Err(Error::Config("rank below 1".into()));
        }
        Ok(())
    }

    /// `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "n_trials={}", self.n_trials);
        let _ = writeln!(s, "delta_theta_mean={:.6}", self.delta_theta_mean);
        let _ = writeln!(s, "delta_theta_std={:.6}", self.delta_theta_std);
        let _ = writeln!(s, "rank_qnn={:.4}", self.rank_qnn);
        let _ = writeln!(s, "rank_complex_mode={:.4}", self.rank_complex_mode);
        let _ = writeln!(s, "recon_error_true_key={:.6}", self.recon_error_true_key);
        let _ = writeln!(s, "recon_error_attacker={:.6}", self.recon_error_attacker);
        if let Some(r) = self.recon_error_raw {
            let _ = writeln!(s, "recon_error_raw={r:.6}");
        }
        let _ = writeln!(s, "inference_accuracy={:.6}", self.inference_accuracy);
        for row in &self.knn {
            let _ = writeln!(s, "knn_k{}_protected={:.6}", row.k, row.protected);
            let _ = writeln!(s, "knn_k{}_plain={:.6}", row.k, row.plain);
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let mut row = |name: &str, value: String| {
            let _ = writeln!(s, "{name:<28} {value:>14}");
        };
        row("seed", self.seed.to_string());
        row("trials", self.n_trials.to_string());
        row("delta theta mean (deg)", format!("{:.3}", self.delta_theta_mean.to_degrees()));
        row("delta theta std (deg)", format!("{:.3}", self.delta_theta_std.to_degrees()));
        row("rank (quaternion)", format!("{:.3}", self.rank_qnn));
        row("rank (complex formula)", format!("{:.3}", self.rank_complex_mode));
        row("recon error, true key", format!("{:.4}", self.recon_error_true_key));
        row("recon error, attacker", format!("{:.4}", self.recon_error_attacker));
        if let Some(r) = self.recon_error_raw {
            row("recon error, raw payload", format!("{r:.4}"));
        }
        for k in &self.knn {
            row(&format!("k-NN k={} protected", k.k), format!("{:.4}", k.protected));
            row(&format!("k-NN k={} plain", k.k), format!("{:.4}", k.plain));
        }
        s
    }
}

/// One protected feature: the true key and the lifted plaintext it hides.
struct Protected {
    key: RotationKey,
    payload: QTensor<f64>,
}

fn protect(feats: &[RealTensor<f64>], idx: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<Protected>> {
    idx.iter()
        .map(|&k| {
            let key = sample_rotation_from(rng);
            let (j, l) = (random_other(rng, feats.len(), k), random_other(rng, feats.len(), k));
            let f = encrypt_features(&feats[k], &feats[j], &feats[l], &key)?;
            Ok(Protected { key, payload: f.payload })
        })
        .collect()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Trains the attackers on `public` data with the known encoder of `net`,
/// attacks protected features of `test` images and scores the results.
pub fn run_benchmark(net: &NetworkSpec, public: &[LabeledImage], test: &[LabeledImage], cfg: &BenchConfig) -> Result<AttackReport> {
    if cfg.workers > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
        return pool.install(|| benchmark_inner(net, public, test, cfg));
    }
    benchmark_inner(net, public, test, cfg)
}

fn benchmark_inner(net: &NetworkSpec, public: &[LabeledImage], test: &[LabeledImage], cfg: &BenchConfig) -> Result<AttackReport> {
    if public.is_empty() || test.is_empty() {
        return Err(Error::Empty("benchmark data"));
    }
    if cfg.n_features == 0 || cfg.n_features > test.len() || cfg.knn_train > public.len() {
        return Err(Error::Config("benchmark sizes exceed the available data".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pub_imgs: Vec<RealTensor<f64>> = public.iter().map(|l| l.pixels.clone()).collect();
    let test_imgs: Vec<RealTensor<f64>> = test.iter().map(|l| l.pixels.clone()).collect();
    let pub_feats = net.encode_features(&pub_imgs)?;
    let test_feats = net.encode_features(&test_imgs)?;

    let disc = train_phase_discriminator(&pub_feats, &DiscriminatorConfig { seed: rng.random(), ..cfg.discriminator.clone() })?;

    let targets: Vec<usize> = (0..cfg.n_features).collect();
    let protected = protect(&test_feats, &targets, &mut rng)?;
    let attack_seed: u64 = rng.random();
    let attacks: Vec<CandidatePhase> = protected
        .iter()
        .enumerate()
        .map(|(i, p)| phase_enumeration_attack(&p.payload, &disc, cfg.n_candidates, attack_seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
        .collect::<Result<_>>()?;
    let delta_thetas: Vec<f64> = protected.iter().zip(&attacks).map(|(p, a)| delta_theta(&p.key, &a.key)).collect::<Result<_>>()?;
    let (dt_mean, dt_std) = mean_std(&delta_thetas);

    let inverter = inversion_attack_train(&pub_feats, &pub_imgs, InversionMode::Decrypted, &InversionConfig { seed: rng.random(), ..cfg.inverter.clone() })?;
    let true_planes: Vec<RealTensor<f64>> = protected.iter().map(|p| decrypt_plane(&p.payload, &p.key)).collect::<Result<_>>()?;
    let rec_true = inverter.reconstruct(&true_planes)?;
    let rec_att = inverter.reconstruct(&attacks.iter().map(|a| a.decrypted.clone()).collect::<Vec<_>>())?;
    let err = |recs: &[RealTensor<f64>]| -> Result<f64> {
        let total: f64 = recs.iter().zip(&targets).map(|(r, &k)| reconstruction_error(r, &test_imgs[k])).sum::<Result<f64>>()?;
        Ok(total / recs.len() as f64)
    };
    let recon_error_true_key = err(&rec_true)?;
    let recon_error_attacker = err(&rec_att)?;

    let recon_error_raw = if cfg.raw_attacker {
        let all: Vec<usize> = (0..pub_feats.len()).collect();
        let pub_protected = protect(&pub_feats, &all, &mut rng)?;
        let raw_train: Vec<RealTensor<f64>> = pub_protected.iter().map(|p| raw_input(&p.payload)).collect::<Result<_>>()?;
        let raw_inv = inversion_attack_train(&raw_train, &pub_imgs, InversionMode::Raw, &InversionConfig { seed: rng.random(), ..cfg.inverter.clone() })?;
        let raw_test: Vec<RealTensor<f64>> = protected.iter().map(|p| raw_input(&p.payload)).collect::<Result<_>>()?;
        Some(err(&raw_inv.reconstruct(&raw_test)?)?)
    } else {
        None
    };

    // k-NN: the attacker labels its own public images, protects them the
    // same way, and runs the same phase attack on both sides.
    let knn_idx: Vec<usize> = (0..cfg.knn_train).collect();
    let knn_protected = protect(&pub_feats, &knn_idx, &mut rng)?;
    let knn_seed: u64 = rng.random();
    let train_dec: Vec<RealTensor<f64>> = knn_protected
        .iter()
        .enumerate()
        .map(|(i, p)| phase_enumeration_attack(&p.payload, &disc, cfg.n_candidates, knn_seed ^ (i as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)).map(|c| c.decrypted))
        .collect::<Result<_>>()?;
    let attr_of = |l: &LabeledImage| l.attr_labels.get(cfg.attribute).copied().ok_or(Error::Config("attribute index out of range".into()));
    let train_attrs: Vec<usize> = knn_idx.iter().map(|&i| attr_of(&public[i])).collect::<Result<_>>()?;
    let query_attrs: Vec<usize> = targets.iter().map(|&i| attr_of(&test[i])).collect::<Result<_>>()?;
    let query_dec: Vec<RealTensor<f64>> = attacks.iter().map(|a| a.decrypted.clone()).collect();
    let plain_train: Vec<RealTensor<f64>> = knn_idx.iter().map(|&i| pub_feats[i].clone()).collect();
    let plain_query: Vec<RealTensor<f64>> = targets.iter().map(|&i| test_feats[i].clone()).collect();
    let knn = cfg
        .k_values
        .iter()
        .map(|&k| {
            let (_, protected) = knn_property_inference(&train_dec, &train_attrs, &query_dec, &query_attrs, k)?;
            let (_, plain) = knn_property_inference(&plain_train, &train_attrs, &plain_query, &query_attrs, k)?;
            Ok(KnnRow { k, protected, plain })
        })
        .collect::<Result<Vec<_>>>()?;

    let report = AttackReport {
        delta_theta_mean: dt_mean,
        delta_theta_std: dt_std,
        rank_qnn: anonymity_rank(dt_mean, RankMode::Quaternion),
        rank_complex_mode: anonymity_rank(dt_mean, RankMode::Complex),
        recon_error_true_key,
        recon_error_attacker,
        recon_error_raw,
        inference_accuracy: knn.first().map_or(0.0, |r| r.protected),
        knn,
        n_trials: cfg.n_features,
        seed: cfg.seed,
        delta_thetas,
    };
    report.check_invariants()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quat::sample_rotation;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn rank_examples() {
        let r5 = anonymity_rank(5f64.to_radians(), RankMode::Quaternion);
        assert!((r5 - 525.6).abs() <= 0.1, "{r5}");
        assert_eq!(anonymity_rank(PI, RankMode::Quaternion), 1.0);
        assert!((anonymity_rank(10f64.to_radians(), RankMode::Complex) - 36.0).abs() < 1e-9);
        assert_eq!(anonymity_rank(0.0, RankMode::Quaternion), f64::INFINITY);
        for mode in [RankMode::Quaternion, RankMode::Complex] {
            let mut prev = f64::INFINITY;
            for i in 1..=180 {
                let r = anonymity_rank((i as f64).to_radians(), mode);
                assert!(r < prev);
                prev = r;
            }
        }
    }

    #[test]
    fn delta_theta_examples() {
        let id = RotationKey::identity();
        assert_eq!(delta_theta(&id, &id).unwrap(), 0.0);
        let quarter = RotationKey::new([0.0, 0.0, 1.0], FRAC_PI_2, 0).unwrap();
        assert!((delta_theta(&id, &quarter).unwrap() - FRAC_PI_2).abs() < 1e-12);
        let about_i = RotationKey::new([1.0, 0.0, 0.0], 1.234, 0).unwrap();
        assert!(delta_theta(&id, &about_i).unwrap().abs() < 1e-7);
        for s in 0..200 {
            let (a, b) = (sample_rotation(s), sample_rotation(s + 1000));
            let (d1, d2) = (delta_theta(&a, &b).unwrap(), delta_theta(&b, &a).unwrap());
            assert!((d1 - d2).abs() < 1e-12 && (0.0..=PI).contains(&d1));
        }
    }

    #[test]
    fn reconstruction_error_examples() {
        let black = RealTensor::<f64>::zeros(vec![1, 4, 4]);
        let white = RealTensor::filled(vec![1, 4, 4], 1.0);
        assert_eq!(reconstruction_error(&black, &black).unwrap(), 0.0);
        assert_eq!(reconstruction_error(&black, &white).unwrap(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = RealTensor::from_fn(vec![1, 1000, 1000], |_| rng.random_range(0.0..1.0));
        let v = RealTensor::from_fn(vec![1, 1000, 1000], |_| rng.random_range(0.0..1.0));
        assert!((reconstruction_error(&u, &v).unwrap() - 1.0 / 3.0).abs() < 0.01);
        assert!(reconstruction_error(&black, &RealTensor::zeros(vec![1, 2, 8])).is_err());
    }

    fn payload(seed: u64) -> (RotationKey, QTensor<f64>, RealTensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mk = |rng: &mut ChaCha8Rng| RealTensor::from_fn(vec![2, 3, 3], |_| rng.random_range(-1.0..1.0));
        let (a, b, c) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let key = sample_rotation(seed);
        let f = encrypt_features(&a, &b, &c, &key).unwrap();
        (key, f.payload, a)
    }

    #[test]
    fn single_candidate_is_returned() {
        let (_, f, _) = payload(1);
        let c = phase_enumeration_with(&f, 1, 9, |_, _| 0.0).unwrap();
        assert_eq!(c.key, candidate_key(9, 0));
        assert_eq!(c.decrypted, decrypt_plane(&f, &c.key).unwrap());
    }

    #[test]
    fn perfect_oracle_finds_the_true_key() {
        let (_, f, a) = payload(2);
        let true_key = candidate_key(5, 37);
        let f = {
            // Re-encrypt with a key that is among the candidates.
            let x = crate::qtensor::rotate_all(conjugate(sample_rotation(2).rotor().unwrap()), &f).unwrap();
            crate::qtensor::rotate_all(true_key.rotor().unwrap(), &x).unwrap()
        };
        let c = phase_enumeration_with(&f, 100, 5, |k, _| if *k == true_key { 1.0 } else { 0.0 }).unwrap();
        assert_eq!(c.key, true_key);
        assert!(c.decrypted.max_abs_diff(&a) < 1e-12);
    }

    #[test]
    fn fast_scoring_matches_direct_scoring() {
        let (_, f, _) = payload(3);
        let disc = Critic::he(18, &[5, 3], 4);
        let fast = phase_enumeration_attack(&f, &disc, 50, 6).unwrap();
        let slow = phase_enumeration_with(&f, 50, 6, |_, a| disc.score(std::slice::from_ref(a)).unwrap()[0]).unwrap();
        assert_eq!(fast.key, slow.key);
        assert!((fast.score - slow.score).abs() < 1e-9);
    }

    #[test]
    fn enumeration_is_independent_of_worker_count() {
        let (_, f, _) = payload(4);
        let disc = Critic::he(18, &[5], 7);
        let run = |w: usize| {
            rayon::ThreadPoolBuilder::new().num_threads(w).build().unwrap().install(|| phase_enumeration_attack(&f, &disc, 300, 8).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn knn_examples() {
        let pts: Vec<RealTensor<f64>> = [0.0, 1.0, 2.0, 10.0, 11.0].iter().map(|&v| RealTensor::filled(vec![1], v)).collect();
        let attrs = [0, 0, 1, 1, 1];
        assert_eq!(knn_predict(&pts, &attrs, &pts[3..4], 1).unwrap(), vec![1]);
        assert_eq!(knn_predict(&pts, &attrs, &[RealTensor::filled(vec![1], 0.4)], 5).unwrap(), vec![1]);
        let tie = knn_predict(&pts, &attrs, &[RealTensor::filled(vec![1], 1.6)], 2).unwrap();
        assert_eq!(tie, vec![1], "nearest neighbour decides a tied vote");
        let (_, acc) = knn_property_inference(&pts, &attrs, &pts, &attrs, 1).unwrap();
        assert_eq!(acc, 1.0);
        assert!(knn_predict(&[], &[], &pts, 1).is_err());
        assert!(knn_predict(&pts, &attrs, &pts, 6).is_err());
    }

    #[test]
    fn raw_mode_consumes_four_planes() {
        let (_, f, _) = payload(5);
        let raw = raw_input(&f).unwrap();
        assert_eq!(raw.shape(), &[8, 3, 3]);
        let imgs: Vec<RealTensor<f64>> = (0..4).map(|i| RealTensor::filled(vec![1, 3, 3], 0.25 * i as f64)).collect();
        let feats = vec![raw; 4];
        let cfg = InversionConfig { steps: 3, ..InversionConfig::default() };
        let inv = inversion_attack_train(&feats, &imgs, InversionMode::Raw, &cfg).unwrap();
        assert_eq!(inv.in_channels(), 8);
        assert_eq!(inv, inversion_attack_train(&feats, &imgs, InversionMode::Raw, &cfg).unwrap());
        let out = inv.reconstruct(&feats[..1]).unwrap();
        assert!(out[0].data().iter().all(|p| (0.0..=1.0).contains(p)));
    }
}
