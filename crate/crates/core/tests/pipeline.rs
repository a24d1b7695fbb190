use proptest::prelude::*;
use qnn_core::attack::{inversion_attack_train, reconstruction_error, run_benchmark, BenchConfig, DiscriminatorConfig, InversionConfig, InversionMode};
use qnn_core::data::generate_shapes;
use qnn_core::network::{decode, encode, run_processing, Mode, NetworkSpec, Topology};
use qnn_core::quat::sample_rotation;
use qnn_core::train::{evaluate_accuracy, TrainConfig, Trainer};
use qnn_core::RealTensor;

fn pixels(d: &[qnn_core::data::LabeledImage]) -> Vec<RealTensor<f64>> {
    d.iter().map(|l| l.pixels.clone()).collect()
}

fn trained(mode: Mode, steps: usize, seed: u64) -> NetworkSpec {
    let data = generate_shapes(600, 16, seed).unwrap();
    let ys: Vec<usize> = data.iter().map(|l| l.class_label).collect();
    let net = NetworkSpec::reference(mode, &Topology::default(), seed).unwrap();
    let mut t = Trainer::new(net, TrainConfig { adversarial: false, seed, ..TrainConfig::default() }).unwrap();
    t.fit(&pixels(&data), &ys, steps, None).unwrap();
    t.net
}

#[test]
fn plaintext_and_protected_classifiers_learn_shapes() {
    let test = generate_shapes(200, 16, 99).unwrap();
    let ys: Vec<usize> = test.iter().map(|l| l.class_label).collect();
    for mode in [Mode::Real, Mode::Qnn] {
        let acc = evaluate_accuracy(&trained(mode, 150, 4), &pixels(&test), &ys, 0).unwrap();
        assert!(acc >= 0.95, "{} accuracy {acc}", mode.name());
    }
}

#[test]
fn protected_prediction_matches_plaintext_prediction() {
    let net = trained(Mode::Qnn, 20, 6);
    let imgs = pixels(&generate_shapes(9, 16, 7).unwrap());
    for (t, tri) in imgs.chunks(3).enumerate() {
        let key = sample_rotation(t as u64);
        let h = run_processing(&encode(&tri[0], &tri[1], &tri[2], &net, &key).unwrap(), &net).unwrap();
        let protected = decode(&h, &key, &net).unwrap();
        let plain = net.plaintext_forward(&tri[0], &tri[1], &tri[2]).unwrap();
        for (a, b) in protected.data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn inverter_reconstructs_plaintext_features() {
    let net = trained(Mode::Qnn, 20, 8);
    let data = generate_shapes(300, 16, 10).unwrap();
    let imgs = pixels(&data);
    let feats = net.encode_features(&imgs).unwrap();
    let inv = inversion_attack_train(&feats[..250], &imgs[..250], InversionMode::Decrypted, &InversionConfig { steps: 600, ..InversionConfig::default() }).unwrap();
    let recon = inv.reconstruct(&feats[250..]).unwrap();
    let err: f64 = recon.iter().zip(&imgs[250..]).map(|(r, i)| reconstruction_error(r, i).unwrap()).sum::<f64>() / 50.0;
    assert!(err < 0.1, "held-out reconstruction error {err}");
}

#[test]
fn small_benchmark_is_consistent_and_deterministic() {
    let net = trained(Mode::Qnn, 40, 12);
    let public = generate_shapes(200, 16, 13).unwrap();
    let test = generate_shapes(60, 16, 14).unwrap();
    let cfg = |workers| BenchConfig {
        n_features: 12,
        n_candidates: 100,
        knn_train: 60,
        discriminator: DiscriminatorConfig { steps: 150, ..DiscriminatorConfig::default() },
        inverter: InversionConfig { steps: 300, ..InversionConfig::default() },
        raw_attacker: false,
        seed: 3,
        workers,
        ..BenchConfig::default()
    };
    let a = run_benchmark(&net, &public, &test, &cfg(1)).unwrap();
    let b = run_benchmark(&net, &public, &test, &cfg(3)).unwrap();
    a.check_invariants().unwrap();
    assert_eq!(a.n_trials, 12);
    assert_eq!(a.delta_thetas, b.delta_thetas);
    assert_eq!(a.to_kv(), b.to_kv());
    assert!(a.recon_error_true_key < a.recon_error_attacker, "{}", a.to_table());
    assert!(a.knn.iter().all(|r| r.plain > r.protected), "{}", a.to_table());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn network_files_round_trip(seed in any::<u64>(), real in any::<bool>(), e in 1usize..4, p in 1usize..4) {
        let mode = if real { Mode::Real } else { Mode::Qnn };
        let topo = Topology { input_shape: vec![1, 6, 6], encoder_channels: e, processing_channels: p, ..Topology::default() };
        let net = NetworkSpec::reference(mode, &topo, seed).unwrap();
        let bytes = net.to_bytes();
        let back = NetworkSpec::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &net);
        prop_assert_eq!(back.to_bytes(), bytes);
    }
}
