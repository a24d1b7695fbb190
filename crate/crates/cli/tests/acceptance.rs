//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.
//!
//! Run with `cargo test --release -p qnn-cli --test acceptance`.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use qnn_bench::{equivariance_error, random_key, random_layer, random_pure, random_real, random_stack, EQUIVARIANT_KINDS};
use qnn_core::attack::{anonymity_rank, run_benchmark, AttackReport, BenchConfig, RankMode};
use qnn_core::data::{generate_shapes, LabeledImage};
use qnn_core::network::{decode, decrypt_plane, encode, encrypt_features, run_processing, Mode, NetworkSpec, Topology};
use qnn_core::train::{evaluate_accuracy, finite_diff_check, layer_gradcheck, TrainConfig, Trainer};
use qnn_core::{LayerKind, LayerSpec, QTensor, RealTensor, RotationKey, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

const TRAIN_STEPS: usize = 300;
const IMAGE_SIZE: usize = 16;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn pixels(d: &[LabeledImage]) -> Vec<RealTensor<f64>> {
    d.iter().map(|l| l.pixels.clone()).collect()
}

fn labels(d: &[LabeledImage]) -> Vec<usize> {
    d.iter().map(|l| l.class_label).collect()
}

fn single_core<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("one-thread pool").install(f)
}

fn equivariance_trials<T: Scalar>(kind: LayerKind, trials: usize, rng: &mut ChaCha8Rng) -> f64 {
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let (c, h, w) = (rng.random_range(1..4), 2 * rng.random_range(1..4), 2 * rng.random_range(1..4));
        let layer = random_layer(kind, c, h, w, rng);
        let batch: Vec<QTensor<T>> = (0..3).map(|_| random_pure(&[c, h, w], rng)).collect();
        let key = random_key(rng);
        worst = worst.max(equivariance_error(std::slice::from_ref(&layer), &batch, &key, t as u64).expect("equivariant layer"));
    }
    worst
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut lines = Vec::new();
    let mut pass = true;
    for kind in EQUIVARIANT_KINDS {
        let e32 = equivariance_trials::<f32>(kind, 200, &mut rng);
        let e64 = equivariance_trials::<f64>(kind, 200, &mut rng);
        pass &= e32 <= 1e-5 && e64 <= 1e-10;
        lines.push(format!("{} {e32:.1e}/{e64:.1e}", kind.name()));
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(30);
    outcome(pass, format!("worst f32/f64 error per kind: {}; {:.1}s", lines.join(", "), elapsed.as_secs_f64()))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut w32, mut w64): (f64, f64) = (0.0, 0.0);
    for s in 0..50 {
        let depth = rng.random_range(3..=6);
        let (c, side) = (rng.random_range(1..4), [4, 8][rng.random_range(0..2)]);
        let layers = random_stack(depth, c, side, side, &mut rng);
        let key = random_key(&mut rng);
        let b32: Vec<QTensor<f32>> = (0..3).map(|_| random_pure(&[c, side, side], &mut rng)).collect();
        let b64: Vec<QTensor<f64>> = (0..3).map(|_| random_pure(&[c, side, side], &mut rng)).collect();
        w32 = w32.max(equivariance_error(&layers, &b32, &key, s).expect("equivariant stack"));
        w64 = w64.max(equivariance_error(&layers, &b64, &key, s).expect("equivariant stack"));
    }
    outcome(w32 <= 1e-5 && w64 <= 1e-10, format!("50 stacks, worst error f32 {w32:.2e}, f64 {w64:.2e}"))
}

fn max_abs_diff<T: Scalar>(a: &RealTensor<T>, b: &RealTensor<T>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).fold(0.0, f64::max)
}

/// A network whose processing stack is empty and whose decoder reads the
/// encoder output directly.
fn identity_processing_net(seed: u64) -> NetworkSpec {
    let mut net = NetworkSpec::reference(Mode::Qnn, &Topology::default(), seed).expect("reference network");
    let feat = net.feature_shape().expect("feature shape");
    let n: usize = feat.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    net.processing.clear();
    net.decoder = vec![
        LayerSpec::Flatten,
        LayerSpec::FullyConnected { weight: random_real(vec![net.class_count, n], (1.0 / n as f64).sqrt(), &mut rng) },
        LayerSpec::Softmax,
    ];
    net.validate().expect("identity-processing network");
    net
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut round_trip: f64 = 0.0;
    for _ in 0..100 {
        let feats: Vec<RealTensor<f32>> = (0..3).map(|_| random_real(vec![4, 8, 8], 2.0, &mut rng).cast()).collect();
        let key = random_key(&mut rng);
        let f = encrypt_features(&feats[0], &feats[1], &feats[2], &key).expect("encrypt");
        round_trip = round_trip.max(max_abs_diff(&decrypt_plane(&f.payload, &key).expect("decrypt"), &feats[0]));
    }
    let net = identity_processing_net(7);
    let images: Vec<RealTensor<f32>> = pixels(&generate_shapes(30, IMAGE_SIZE, 9).expect("shapes")).iter().map(|p| p.cast()).collect();
    let mut pipeline: f64 = 0.0;
    for t in 0..10 {
        let (i, b, c) = (&images[3 * t], &images[3 * t + 1], &images[3 * t + 2]);
        let key = random_key(&mut rng);
        let h = run_processing(&encode(i, b, c, &net, &key).expect("encode"), &net).expect("process");
        let protected = decode(&h, &key, &net).expect("decode");
        let plain = net.plaintext_forward(i, b, c).expect("plaintext");
        pipeline = pipeline.max(max_abs_diff(&protected, &plain));
    }
    outcome(
        round_trip <= 1e-6 && pipeline <= 1e-5,
        format!("100 keys, f32 round trip {round_trip:.2e}; identity-processing pipeline {pipeline:.2e}"),
    )
}

fn probe_weights(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> RealTensor<f64> {
    random_real(shape, 0.5, rng)
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let conv = |rng: &mut ChaCha8Rng| LayerSpec::Conv { weight: probe_weights(vec![3, 3, 3, 3], rng), stride: 1, pad: 1 };
    let cases: Vec<(LayerSpec, Vec<usize>, usize)> = vec![
        (conv(&mut rng), vec![3, 4, 4], 4),
        (LayerSpec::Conv { weight: probe_weights(vec![2, 3, 3, 3], &mut rng), stride: 2, pad: 0 }, vec![3, 5, 5], 1),
        (LayerSpec::FullyConnected { weight: probe_weights(vec![5, 12], &mut rng) }, vec![12], 4),
        (LayerSpec::QRelu { c: 1.0 }, vec![3, 4, 4], 4),
        (LayerSpec::QBatchNorm { eps: 1e-5, running: None }, vec![3, 4, 4], 4),
        (LayerSpec::MaxPool { window: 2, stride: 2 }, vec![3, 4, 4], 4),
        (LayerSpec::AvgPool { window: 2, stride: 2 }, vec![3, 4, 4], 4),
        (LayerSpec::Dropout { rate: 0.3 }, vec![3, 4, 4], 4),
        (LayerSpec::Residual { inner: vec![conv(&mut rng), LayerSpec::QRelu { c: 1.0 }] }, vec![3, 4, 4], 4),
        (LayerSpec::Relu, vec![3, 4, 4], 1),
        (LayerSpec::Flatten, vec![3, 4, 4], 1),
    ];
    let mut worst: f64 = 0.0;
    let mut pass = true;
    let mut failing = Vec::new();
    for (i, (layer, shape, planes)) in cases.iter().enumerate() {
        let r = layer_gradcheck(layer, shape, *planes, 3, 40 + i as u64, 1e-5, 1e-3).expect("layer gradcheck");
        worst = worst.max(r.max_rel_err());
        if !r.passed() {
            pass = false;
            failing.push(layer.kind().name());
        }
    }
    // Whole network: every weight block's gradient passes through the
    // encryption and decryption rotations.
    let net = NetworkSpec::reference(
        Mode::Qnn,
        &Topology { input_shape: vec![1, 8, 8], encoder_channels: 2, processing_channels: 3, ..Topology::default() },
        5,
    )
    .expect("network");
    let data = generate_shapes(4, 8, 6).expect("shapes");
    let r = finite_diff_check(&net, &pixels(&data), &labels(&data), 8, 1e-5, 1e-3, 20).expect("network gradcheck");
    worst = worst.max(r.max_rel_err());
    pass &= r.passed();
    if !r.passed() {
        failing.push("network");
    }
    outcome(pass, format!("{} layer cases + network with rotations, worst rel err {worst:.2e}; failing {failing:?}", cases.len()))
}

struct Trained {
    net: NetworkSpec,
    accuracy: f64,
    seconds: f64,
}

fn train(mode: Mode, adversarial: bool, train: &[LabeledImage], test: &[LabeledImage]) -> Trained {
    let net = NetworkSpec::reference(mode, &Topology::default(), 7).expect("network");
    let cfg = TrainConfig { adversarial, seed: 3, ..TrainConfig::default() };
    let (xs, ys) = (pixels(train), labels(train));
    let start = Instant::now();
    let net = single_core(|| {
        let mut t = Trainer::new(net, cfg).expect("trainer");
        t.fit(&xs, &ys, TRAIN_STEPS, None).expect("training");
        t.net
    });
    let seconds = start.elapsed().as_secs_f64();
    let accuracy = evaluate_accuracy(&net, &pixels(test), &labels(test), 0).expect("accuracy");
    Trained { net, accuracy, seconds }
}

fn criterion_5(gan: &Trained, nogan: &Trained, real: &Trained) -> Outcome {
    let mut pass = real.accuracy >= 0.9 && real.seconds < 300.0;
    for q in [gan, nogan] {
        pass &= q.accuracy >= 0.9 && (q.accuracy - real.accuracy).abs() <= 0.05 && q.seconds < 300.0;
    }
    outcome(
        pass,
        format!(
            "held-out accuracy QNN+GAN {:.3} ({:.0}s), QNN {:.3} ({:.0}s), real {:.3} ({:.0}s), {TRAIN_STEPS} steps on one core",
            gan.accuracy, gan.seconds, nogan.accuracy, nogan.seconds, real.accuracy, real.seconds
        ),
    )
}

fn criterion_6(r: &AttackReport) -> Outcome {
    let pass = r.n_trials >= 100 && r.recon_error_attacker >= 2.0 * r.recon_error_true_key && r.recon_error_true_key <= 0.1;
    let raw = r.recon_error_raw.map_or(String::new(), |e| format!(", raw-payload attacker {e:.4}"));
    outcome(
        pass,
        format!(
            "{} features: attacker {:.4} vs true key {:.4} (ratio {:.2}){raw}",
            r.n_trials,
            r.recon_error_attacker,
            r.recon_error_true_key,
            r.recon_error_attacker / r.recon_error_true_key
        ),
    )
}

fn qnn_bin() -> &'static str {
    env!("CARGO_BIN_EXE_qnn")
}

fn run(args: &[&str]) -> std::process::Output {
    Command::new(qnn_bin()).args(args).output().expect("qnn binary runs")
}

fn run_in(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(qnn_bin()).current_dir(dir).args(args).output().expect("qnn binary runs")
}

fn criterion_7() -> Outcome {
    let out = run(&["bench", "--mode", "rank", "--dtheta-deg", "5"]);
    let printed = String::from_utf8_lossy(&out.stdout).trim().to_string();
    let value: f64 = printed.parse().unwrap_or(f64::NAN);
    let at_pi = anonymity_rank(std::f64::consts::PI, RankMode::Quaternion);
    let pass = out.status.success() && (value - 525.6).abs() <= 0.1 && at_pi == 1.0;
    outcome(pass, format!("rank(5°) printed {printed}, library {:.4}; rank(π) = {at_pi}", anonymity_rank(5f64.to_radians(), RankMode::Quaternion)))
}

fn criterion_8(gan: &AttackReport, nogan: &AttackReport) -> Outcome {
    let d: Vec<f64> = gan.delta_thetas.iter().zip(&nogan.delta_thetas).map(|(g, n)| g - n).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let t = mean / (sd / n.sqrt());
    let p = 1.0 - StudentsT::new(0.0, 1.0, n - 1.0).expect("t distribution").cdf(t);
    let pass = gan.delta_theta_mean > nogan.delta_theta_mean && p < 0.05;
    outcome(
        pass,
        format!(
            "mean Δθ with GAN {:.2}°, without {:.2}° over {} paired features; t = {t:.3}, one-sided p = {p:.4}",
            gan.delta_theta_mean.to_degrees(),
            nogan.delta_theta_mean.to_degrees(),
            d.len()
        ),
    )
}

fn criterion_9(r: &AttackReport) -> Outcome {
    let chance = 0.25;
    let pass = r.knn.iter().all(|row| row.protected <= chance + 0.15 && row.plain >= 0.9) && r.knn.len() == 3;
    let rows: Vec<String> = r.knn.iter().map(|row| format!("k={} protected {:.3} plain {:.3}", row.k, row.protected, row.plain)).collect();
    outcome(pass, format!("quadrant attribute, chance {chance}: {}", rows.join("; ")))
}

fn corrupt_magic(path: &Path) {
    let mut bytes = std::fs::read(path).expect("artifact");
    bytes[..4].copy_from_slice(b"ZZZZ");
    std::fs::write(path, bytes).expect("rewrite");
}

fn criterion_10(dir: &Path) -> Outcome {
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let mut problems = Vec::new();
    let steps: [&[&str]; 4] = [
        &["datagen", "--out", &p("data"), "--count", "60", "--size", "16", "--seed", "4"],
        &["train", "--data", &p("data/manifest.txt"), "--out", &p("net.qnn"), "--steps", "5", "--batch", "8", "--seed", "4"],
        &["encrypt", "--net", &p("net.qnn"), "--image", &p("data/img_00000.pgm"), "--fool1", &p("data/img_00001.pgm"), "--fool2", &p("data/img_00002.pgm"), "--out", &p("f.qtf"), "--key-out", &p("k.key"), "--seed", "4"],
        &["process", "--net", &p("net.qnn"), "--in", &p("f.qtf"), "--out", &p("h.qtf")],
    ];
    for args in steps {
        let out = run(args);
        if !out.status.success() {
            problems.push(format!("{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr).trim()));
        }
    }
    if !problems.is_empty() {
        return outcome(false, problems.join("; "));
    }
    let key_text = std::fs::read_to_string(p("k.key")).expect("key");
    if RotationKey::from_text(&key_text).map(|k| k.to_text()).ok().as_deref() != Some(key_text.as_str()) {
        problems.push("key text changed on reload".into());
    }
    for name in ["f.qtf", "h.qtf"] {
        let bytes = std::fs::read(p(name)).expect("feature");
        if QTensor::<f32>::from_bytes(&bytes).map(|q| q.to_bytes()).ok() != Some(bytes) {
            problems.push(format!("{name} changed on reload"));
        }
    }
    let bytes = std::fs::read(p("net.qnn")).expect("network");
    if NetworkSpec::from_bytes(&bytes).map(|n| n.to_bytes()).ok() != Some(bytes) {
        problems.push("network changed on reload".into());
    }
    let mut codes = Vec::new();
    std::fs::write(p("k.key"), key_text.replacen("axis", "ZZZZ", 1)).expect("rewrite key");
    codes.push(run(&["decrypt", "--net", &p("net.qnn"), "--in", &p("h.qtf"), "--key", &p("k.key")]).status.code());
    corrupt_magic(Path::new(&p("f.qtf")));
    codes.push(run(&["process", "--net", &p("net.qnn"), "--in", &p("f.qtf"), "--out", &p("x.qtf")]).status.code());
    corrupt_magic(Path::new(&p("net.qnn")));
    codes.push(run(&["process", "--net", &p("net.qnn"), "--in", &p("h.qtf"), "--out", &p("x.qtf")]).status.code());
    if codes.iter().any(|c| *c != Some(4)) {
        problems.push(format!("corrupted files gave exit codes {codes:?}, expected 4"));
    }
    let pass = problems.is_empty();
    outcome(pass, if pass { format!("key, feature and network files reload bit-exactly; corrupted magic exits {codes:?}") } else { problems.join("; ") })
}

/// Runs the whole pipeline inside `dir`, returning every artifact's bytes
/// and every command's stdout.
fn pipeline(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let p = |name: &str| name.to_string();
    let commands: Vec<Vec<String>> = [
        vec!["datagen", "--out", &p("data"), "--count", "80", "--size", "16", "--seed", "11"],
        vec!["train", "--data", &p("data/manifest.txt"), "--out", &p("net.qnn"), "--steps", "8", "--batch", "8", "--seed", "11", "--log", &p("train.log")],
        vec!["keygen", "--out", &p("key.txt"), "--seed", "11"],
        vec!["encrypt", "--net", &p("net.qnn"), "--image", &p("data/img_00003.pgm"), "--fool1", &p("data/img_00004.pgm"), "--fool2", &p("data/img_00005.pgm"), "--out", &p("f.qtf"), "--key-out", &p("k.key"), "--seed", "11"],
        vec!["process", "--net", &p("net.qnn"), "--in", &p("f.qtf"), "--out", &p("h.qtf")],
        vec!["decrypt", "--net", &p("net.qnn"), "--in", &p("h.qtf"), "--key", &p("k.key"), "--out", &p("scores.txt")],
        vec!["decrypt", "--net", &p("net.qnn"), "--in", &p("f.qtf"), "--key", &p("k.key"), "--plane-out", &p("plane.qtf")],
        vec!["attack", "--net", &p("net.qnn"), "--in", &p("f.qtf"), "--public", &p("data/manifest.txt"), "--eval-key", &p("k.key"), "--candidates", "50", "--disc-steps", "20", "--inverter-steps", "20", "--recon-out", &p("recon.pgm"), "--seed", "11", "--workers", "2"],
        vec!["bench", "--mode", "attack", "--net", &p("net.qnn"), "--public", &p("data/manifest.txt"), "--test", &p("data/manifest.txt"), "--features", "6", "--candidates", "30", "--knn-train", "20", "--seed", "11", "--workers", "3", "--format", "kv"],
        vec!["gradcheck", "--seed", "11"],
    ]
    .into_iter()
    .map(|c| c.into_iter().map(str::to_string).collect())
    .collect();
    let mut outputs = Vec::new();
    for c in &commands {
        let args: Vec<&str> = c.iter().map(String::as_str).collect();
        let out = run_in(dir, &args);
        outputs.push((format!("{} stdout (exit {:?})", c[0], out.status.code()), out.stdout));
    }
    let mut files: Vec<_> = walk(dir);
    files.sort();
    for f in files {
        let rel = f.strip_prefix(dir).expect("inside dir").to_string_lossy().into_owned();
        outputs.push((rel, std::fs::read(&f).expect("artifact")));
    }
    outputs
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).expect("dir").flatten() {
        let path = e.path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}

fn criterion_11(a: &Path, b: &Path) -> Outcome {
    let first = pipeline(a);
    let second = pipeline(b);
    let failed: Vec<&String> = first.iter().filter(|(n, _)| n.contains("stdout") && !n.ends_with("(exit Some(0))")).map(|(n, _)| n).collect();
    let differing: Vec<&String> = first.iter().zip(&second).filter(|(x, y)| x != y).map(|(x, _)| &x.0).collect();
    let pass = failed.is_empty() && differing.is_empty() && first.len() == second.len();
    outcome(pass, format!("{} outputs compared across two runs; differing {differing:?}; failed commands {failed:?}", first.len()))
}

fn main() {
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |n: usize, o: Outcome| {
        println!("criterion {n}: {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, o));
    };
    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());
    report(4, criterion_4());

    let train_set = generate_shapes(2000, IMAGE_SIZE, 1).expect("shapes");
    let public = generate_shapes(600, IMAGE_SIZE, 5).expect("shapes");
    let test = generate_shapes(400, IMAGE_SIZE, 2).expect("shapes");
    let gan = train(Mode::Qnn, true, &train_set, &test);
    let nogan = train(Mode::Qnn, false, &train_set, &test);
    let real = train(Mode::Real, false, &train_set, &test);
    report(5, criterion_5(&gan, &nogan, &real));

    let cfg = BenchConfig { seed: 17, ..BenchConfig::default() };
    let gan_report = run_benchmark(&gan.net, &public, &test, &cfg).expect("benchmark");
    let nogan_report = run_benchmark(&nogan.net, &public, &test, &cfg).expect("benchmark");
    report(6, criterion_6(&gan_report));
    report(7, criterion_7());
    report(8, criterion_8(&gan_report, &nogan_report));
    report(9, criterion_9(&gan_report));

    let tmp = tempfile::tempdir().expect("tempdir");
    let (a, b, c) = (tmp.path().join("formats"), tmp.path().join("run_a"), tmp.path().join("run_b"));
    for d in [&a, &b, &c] {
        std::fs::create_dir_all(d).expect("mkdir");
    }
    report(10, criterion_10(&a));
    report(11, criterion_11(&b, &c));

    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
