use std::path::Path;
use std::process::{Command, Output};

fn qnn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qnn")).current_dir(dir).args(args).output().expect("qnn runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let o = qnn(dir, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

/// A tiny dataset, network and encrypted feature in `dir`.
fn setup(dir: &Path) {
    ok(dir, &["datagen", "--out", "data", "--count", "40", "--size", "8", "--seed", "2"]);
    ok(dir, &["train", "--data", "data/manifest.txt", "--out", "net.qnn", "--steps", "3", "--batch", "4", "--encoder-channels", "2", "--processing-channels", "2", "--seed", "2"]);
    ok(dir, &[
        "encrypt", "--net", "net.qnn", "--image", "data/img_00000.pgm", "--fool1", "data/img_00001.pgm", "--fool2", "data/img_00002.pgm",
        "--out", "f.qtf", "--key-out", "k.key", "--seed", "5",
    ]);
}

#[test]
fn rank_prints_table_value() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(stdout(&ok(dir.path(), &["bench", "--mode", "rank", "--dtheta-deg", "5"])).trim(), "525.6");
    assert_eq!(stdout(&ok(dir.path(), &["bench", "--mode", "rank", "--dtheta-deg", "180"])).trim(), "1.0");
    assert_eq!(qnn(dir.path(), &["bench", "--mode", "rank", "--dtheta-deg", "0"]).status.code(), Some(5));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(qnn(d, &["keygen", "--out", "k", "--frobnicate"]).status.code(), Some(2));
    assert_eq!(qnn(d, &["process", "--net", "missing.qnn", "--in", "f.qtf", "--out", "h.qtf"]).status.code(), Some(3));
    setup(d);
    assert_eq!(qnn(d, &["process", "--net", "net.qnn", "--in", "f.qtf", "--out", "h.qtf", "--key", "k.key"]).status.code(), Some(5));
    assert!(!d.join("h.qtf").exists());
    let mut bytes = std::fs::read(d.join("f.qtf")).unwrap();
    bytes[..4].copy_from_slice(b"QTF9");
    std::fs::write(d.join("bad.qtf"), &bytes).unwrap();
    assert_eq!(qnn(d, &["process", "--net", "net.qnn", "--in", "bad.qtf", "--out", "h.qtf"]).status.code(), Some(4));
    std::fs::write(d.join("short.qtf"), &bytes[..10]).unwrap();
    assert_eq!(qnn(d, &["process", "--net", "net.qnn", "--in", "short.qtf", "--out", "h.qtf"]).status.code(), Some(4));
}

#[test]
fn protected_pipeline_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    ok(d, &["process", "--net", "net.qnn", "--in", "f.qtf", "--out", "h.qtf"]);
    let scores = stdout(&ok(d, &["decrypt", "--net", "net.qnn", "--in", "h.qtf", "--key", "k.key"]));
    let total: f64 = scores.lines().filter(|l| l.starts_with("class_")).map(|l| l.split('=').nth(1).unwrap().parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-4, "{scores}");
    assert!(scores.contains("predicted="));
    ok(d, &["decrypt", "--net", "net.qnn", "--in", "f.qtf", "--key", "k.key", "--plane-out", "plane.qtf"]);
    let rt = stdout(&ok(d, &["bench", "--mode", "roundtrip", "--net", "net.qnn", "--image", "data/img_00000.pgm", "--decrypted", "plane.qtf", "--format", "kv"]));
    assert!(rt.contains("result=PASS"), "{rt}");
    // Paired with the wrong image the check fails.
    let o = qnn(d, &["bench", "--mode", "roundtrip", "--net", "net.qnn", "--image", "data/img_00001.pgm", "--decrypted", "plane.qtf"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn repeated_commands_are_byte_identical() {
    let runs: Vec<Vec<Vec<u8>>> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let d = dir.path();
            setup(d);
            ok(d, &["process", "--net", "net.qnn", "--in", "f.qtf", "--out", "h.qtf"]);
            let attack = ok(d, &[
                "attack", "--net", "net.qnn", "--in", "f.qtf", "--public", "data/manifest.txt", "--eval-key", "k.key", "--candidates", "20",
                "--disc-steps", "5", "--inverter-steps", "5", "--recon-out", "r.pgm", "--format", "kv", "--workers", "2",
            ]);
            let mut out = vec![attack.stdout];
            for f in ["data/manifest.txt", "data/img_00007.pgm", "net.qnn", "f.qtf", "k.key", "h.qtf", "r.pgm"] {
                out.push(std::fs::read(d.join(f)).unwrap());
            }
            out
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn gradcheck_passes_on_reference_network() {
    let dir = tempfile::tempdir().unwrap();
    let out = stdout(&ok(dir.path(), &["gradcheck", "--seed", "3", "--samples", "2"]));
    assert!(out.lines().skip(1).all(|l| l.starts_with("PASS")), "{out}");
}

#[test]
fn datagen_refuses_non_empty_directory() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["datagen", "--out", "data", "--count", "4", "--size", "8"]);
    assert_eq!(qnn(d, &["datagen", "--out", "data", "--count", "4", "--size", "8"]).status.code(), Some(5));
}
