//! `qnn`: command-line front end for quaternion privacy-preserving networks.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use qnn_core::attack::{
    anonymity_rank, delta_theta, inversion_attack_train, phase_enumeration_attack, run_benchmark, train_phase_discriminator,
    BenchConfig, DiscriminatorConfig, InversionConfig, InversionMode, RankMode,
};
use qnn_core::data::{generate_shapes, load_pgm, pgm_bytes, read_manifest, write_dataset, LabeledImage, ATTR_QUADRANT};
use qnn_core::layers::{DEFAULT_BN_EPS, DEFAULT_QRELU_C};
use qnn_core::network::{decrypt_plane, encrypt_features, run_processing, EncryptedFeature, Mode, NetworkSpec, Topology};
use qnn_core::quat::sample_rotation;
use qnn_core::train::{evaluate_accuracy, finite_diff_check, layer_gradcheck, TrainConfig, Trainer};
use qnn_core::{Error, LayerSpec, QTensor, RealTensor, RotationKey};

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_MISSING: u8 = 3;
const EXIT_FORMAT: u8 = 4;
const EXIT_CONFIG: u8 = 5;
const EXIT_RUNTIME: u8 = 6;

#[derive(Parser)]
#[command(name = "qnn", version, about = "Quaternion-valued networks that hide features in a secret rotation phase")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset as PGM files plus a manifest.
    Datagen(DatagenArgs),
    /// Train a network on a dataset manifest.
    Train(TrainArgs),
    /// Sample a rotation key.
    Keygen(KeygenArgs),
    /// Encode an image, pair it with two fooling images and rotate with a fresh key.
    Encrypt(EncryptArgs),
    /// Run the processing module on an encrypted feature. Takes no key.
    Process(ProcessArgs),
    /// Undo the rotation, read the target plane and, for processed features, classify.
    Decrypt(DecryptArgs),
    /// Phase-enumeration and inversion attack on one encrypted feature.
    Attack(AttackArgs),
    /// Metrics, round-trip verification and the full attack benchmark.
    Bench(BenchArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct DatagenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Qnn,
    Real,
}

#[derive(Args)]
struct TrainArgs {
    /// Training manifest.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Held-out manifest; accuracy is printed when given.
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "qnn")]
    mode: ModeArg,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0.1)]
    critic_lr: f64,
    #[arg(long, default_value_t = 1e4)]
    gan_weight: f64,
    #[arg(long, default_value_t = 5)]
    critic_steps: usize,
    #[arg(long, default_value_t = 4)]
    fake_phases: usize,
    #[arg(long, default_value_t = 0.01)]
    clip: f64,
    /// Train without the adversarial phase term.
    #[arg(long)]
    no_gan: bool,
    /// QReLU threshold `C`.
    #[arg(long, default_value_t = DEFAULT_QRELU_C)]
    qrelu_c: f64,
    /// Batch-norm `ε`.
    #[arg(long, default_value_t = DEFAULT_BN_EPS)]
    bn_eps: f64,
    #[arg(long, default_value_t = 4)]
    encoder_channels: usize,
    #[arg(long, default_value_t = 8)]
    processing_channels: usize,
    /// Per-step loss log, tab-separated.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct KeygenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EncryptArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    fool1: PathBuf,
    #[arg(long)]
    fool2: PathBuf,
    /// Encrypted feature file.
    #[arg(long)]
    out: PathBuf,
    /// Where the freshly sampled key is written.
    #[arg(long)]
    key_out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ProcessArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Rejected: processing never sees a key.
    #[arg(long, hide = true)]
    key: Option<PathBuf>,
}

#[derive(Args)]
struct DecryptArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    key: PathBuf,
    /// Class scores report (processed features only).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Decrypted target plane as a feature file with only plane i set.
    #[arg(long)]
    plane_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Kv,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    net: PathBuf,
    /// Encrypted, unprocessed feature.
    #[arg(long = "in")]
    input: PathBuf,
    /// Attacker's own labelled images.
    #[arg(long)]
    public: PathBuf,
    /// True key, read only after the attack to score the phase error.
    #[arg(long)]
    eval_key: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    candidates: usize,
    #[arg(long, default_value_t = 600)]
    disc_steps: usize,
    #[arg(long, default_value_t = 1000)]
    inverter_steps: usize,
    /// Reconstructed image.
    #[arg(long)]
    recon_out: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
    #[arg(long, default_value_t = 0)]
    workers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchMode {
    Rank,
    Roundtrip,
    Attack,
}

#[derive(Clone, Copy, ValueEnum)]
enum RankModeArg {
    Quaternion,
    Complex,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_enum)]
    mode: BenchMode,
    /// Phase error for `rank`, in degrees.
    #[arg(long)]
    dtheta_deg: Option<f64>,
    #[arg(long, value_enum, default_value = "quaternion")]
    rank_mode: RankModeArg,
    #[arg(long)]
    net: Option<PathBuf>,
    /// Plaintext image for `roundtrip`.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Output of `decrypt --plane-out` for `roundtrip`.
    #[arg(long)]
    decrypted: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
    /// Attacker's labelled images for `attack`.
    #[arg(long)]
    public: Option<PathBuf>,
    /// Protected test images for `attack`.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    features: usize,
    #[arg(long, default_value_t = 1000)]
    candidates: usize,
    #[arg(long, default_value_t = 400)]
    knn_train: usize,
    /// Comma-separated neighbour counts.
    #[arg(long, default_value = "1,3,5")]
    k: String,
    #[arg(long, default_value_t = ATTR_QUADRANT)]
    attribute: usize,
    #[arg(long)]
    no_raw: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
    #[arg(long, default_value_t = 0)]
    workers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Network to check; a reference network is built from the seed otherwise.
    #[arg(long)]
    net: Option<PathBuf>,
    /// Images for the whole-network check; synthetic ones otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    samples: usize,
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    /// Probes per weight tensor.
    #[arg(long, default_value_t = 12)]
    probes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

enum Failure {
    Core(Error),
    /// A check ran and did not pass.
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

type CliResult<T> = Result<T, Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::MissingArtifact(_) => EXIT_MISSING,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING,
        e if e.is_format_error() => EXIT_FORMAT,
        Error::Config(_) | Error::ShapeMismatch(_) | Error::InvalidKey(_) | Error::NonUnitRotor(_) | Error::Empty(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn config(msg: impl Into<String>) -> Failure {
    Failure::Core(Error::Config(msg.into()))
}

fn require(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()).into())
    }
}

fn require_some<'a>(p: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    let p = p.as_deref().ok_or_else(|| config(format!("--{flag} is required for this mode")))?;
    require(p)?;
    Ok(p)
}

/// Writes through a temporary file in the target directory, then renames.
fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    if !dir.is_dir() {
        return Err(Error::MissingArtifact(dir.to_path_buf()).into());
    }
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Failure::Core(Error::Io(e.error)))?;
    Ok(())
}

fn load_net(path: &Path) -> CliResult<NetworkSpec> {
    require(path)?;
    Ok(NetworkSpec::load(path)?)
}

fn load_key(path: &Path) -> CliResult<RotationKey> {
    require(path)?;
    Ok(RotationKey::load(path)?)
}

fn load_feature(path: &Path) -> CliResult<QTensor<f64>> {
    require(path)?;
    Ok(QTensor::<f32>::load(path)?.cast())
}

fn load_image(path: &Path) -> CliResult<RealTensor<f64>> {
    require(path)?;
    Ok(load_pgm(path)?)
}

fn load_data(path: &Path) -> CliResult<Vec<LabeledImage>> {
    require(path)?;
    Ok(read_manifest(path)?)
}

fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn datagen(a: DatagenArgs) -> CliResult<()> {
    let images = generate_shapes(a.count, a.size, a.seed)?;
    if a.out.exists() && std::fs::read_dir(&a.out)?.next().is_some() {
        return Err(config(format!("{} exists and is not empty", a.out.display())));
    }
    let parent = match a.out.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&parent)?;
    let staging = tempfile::Builder::new().prefix(".datagen").tempdir_in(&parent)?;
    write_dataset(staging.path(), &images)?;
    if a.out.exists() {
        std::fs::remove_dir(&a.out)?;
    }
    std::fs::rename(staging.path(), &a.out)?;
    // The directory now lives at its final name; nothing is left to clean up.
    std::mem::forget(staging);
    println!("wrote {} images to {} (seed {})", images.len(), a.out.display(), a.seed);
    Ok(())
}

fn pixels_and_labels(data: &[LabeledImage]) -> (Vec<RealTensor<f64>>, Vec<usize>) {
    (data.iter().map(|l| l.pixels.clone()).collect(), data.iter().map(|l| l.class_label).collect())
}

fn train(a: TrainArgs) -> CliResult<()> {
    let data = load_data(&a.data)?;
    let test = a.test_data.as_deref().map(load_data).transpose()?;
    let mode = match a.mode {
        ModeArg::Qnn => Mode::Qnn,
        ModeArg::Real => Mode::Real,
    };
    let classes = data.iter().map(|l| l.class_label).max().unwrap_or(0) + 1;
    let topo = Topology {
        input_shape: data[0].pixels.shape().to_vec(),
        encoder_channels: a.encoder_channels,
        processing_channels: a.processing_channels,
        class_count: classes,
        qrelu_c: a.qrelu_c,
        bn_eps: a.bn_eps,
        ..Topology::default()
    };
    let net = NetworkSpec::reference(mode, &topo, a.seed)?;
    let cfg = TrainConfig {
        lr: a.lr,
        critic_lr: a.critic_lr,
        batch: a.batch,
        critic_steps: a.critic_steps,
        fake_phases: a.fake_phases,
        clip: a.clip,
        gan_weight: a.gan_weight,
        adversarial: !a.no_gan,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let (xs, ys) = pixels_and_labels(&data);
    let mut trainer = Trainer::new(net, cfg)?;
    let mut log = Vec::new();
    let reports = trainer.fit(&xs, &ys, a.steps, Some(&mut log))?;
    if let Some(p) = &a.log {
        write_atomic(p, &log)?;
    }
    write_atomic(&a.out, &trainer.net.to_bytes())?;
    let last = reports.last().map_or(f64::NAN, |r| r.task_loss);
    println!("seed {} steps {} final task loss {last:.6}", a.seed, a.steps);
    if let Some(test) = test {
        let (tx, ty) = pixels_and_labels(&test);
        println!("test accuracy {:.4}", evaluate_accuracy(&trainer.net, &tx, &ty, a.seed)?);
    }
    Ok(())
}

fn keygen(a: KeygenArgs) -> CliResult<()> {
    let key = sample_rotation(a.seed);
    write_atomic(&a.out, key.to_text().as_bytes())?;
    println!("key {:016x} (seed {})", key.key_id(), a.seed);
    Ok(())
}

fn encrypt(a: EncryptArgs) -> CliResult<()> {
    let net = load_net(&a.net)?;
    let images = [load_image(&a.image)?, load_image(&a.fool1)?, load_image(&a.fool2)?];
    let feats = net.encode_features(&images)?;
    let key = sample_rotation(a.seed);
    let f = encrypt_features(&feats[0], &feats[1], &feats[2], &key)?;
    write_atomic(&a.out, &f.payload.cast::<f32>().to_bytes())?;
    write_atomic(&a.key_out, key.to_text().as_bytes())?;
    println!("encrypted {:?} with key {:016x} (seed {})", f.payload.shape(), key.key_id(), a.seed);
    Ok(())
}

fn process(a: ProcessArgs) -> CliResult<()> {
    if a.key.is_some() {
        return Err(config("process runs without the key; remove --key"));
    }
    let net = load_net(&a.net)?;
    let f = load_feature(&a.input)?;
    let h = run_processing(&EncryptedFeature { payload: f, key_id: 0 }, &net)?;
    write_atomic(&a.out, &h.payload.cast::<f32>().to_bytes())?;
    println!("processed {:?} -> {:?}", net.feature_shape()?, h.payload.shape());
    Ok(())
}

fn decrypt(a: DecryptArgs) -> CliResult<()> {
    let net = load_net(&a.net)?;
    let h = load_feature(&a.input)?;
    let key = load_key(&a.key)?;
    let plane = rotate_back(&h, &key)?;
    if let Some(p) = &a.plane_out {
        let n = plane.len();
        let q = QTensor::new(plane.shape().to_vec(), [vec![0.0f32; n], plane.data().iter().map(|&v| v as f32).collect(), vec![0.0; n], vec![0.0; n]])?;
        write_atomic(p, &q.to_bytes())?;
    }
    if h.shape() == net.processing_output_shape()?.as_slice() {
        let probs = net.decode_features(vec![plane])?.remove(0);
        let mut s = String::new();
        let best = probs.data().iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &p)| if p > b.1 { (i, p) } else { b });
        for (i, p) in probs.data().iter().enumerate() {
            let _ = writeln!(s, "class_{i}={p:.6}");
        }
        let _ = writeln!(s, "predicted={}", best.0);
        emit(a.out.as_deref(), &s)?;
    } else if a.plane_out.is_none() {
        return Err(config("feature is not a processing output; pass --plane-out to extract the target plane"));
    }
    Ok(())
}

fn rotate_back(h: &QTensor<f64>, key: &RotationKey) -> CliResult<RealTensor<f64>> {
    Ok(decrypt_plane(h, key)?)
}

fn attack(a: AttackArgs) -> CliResult<()> {
    let net = load_net(&a.net)?;
    let f = load_feature(&a.input)?;
    let public = load_data(&a.public)?;
    if f.shape() != net.feature_shape()?.as_slice() {
        return Err(config("attack needs an encoder output feature, not a processed one"));
    }
    let run = || -> CliResult<String> {
        let imgs: Vec<RealTensor<f64>> = public.iter().map(|l| l.pixels.clone()).collect();
        let feats = net.encode_features(&imgs)?;
        let disc = train_phase_discriminator(&feats, &DiscriminatorConfig { steps: a.disc_steps, seed: a.seed, ..DiscriminatorConfig::default() })?;
        let best = phase_enumeration_attack(&f, &disc, a.candidates, a.seed)?;
        let inv = inversion_attack_train(&feats, &imgs, InversionMode::Decrypted, &InversionConfig { steps: a.inverter_steps, seed: a.seed, ..InversionConfig::default() })?;
        let recon = inv.reconstruct(std::slice::from_ref(&best.decrypted))?.remove(0);
        if let Some(p) = &a.recon_out {
            write_atomic(p, &pgm_bytes(&recon)?)?;
        }
        let mut rows = vec![
            ("seed".to_string(), a.seed.to_string()),
            ("candidates".into(), a.candidates.to_string()),
            ("score".into(), format!("{:.6}", best.score)),
            ("estimated_key".into(), best.key.to_text().trim().replace('\n', "; ")),
        ];
        if let Some(k) = &a.eval_key {
            let truth = load_key(k)?;
            let dt = delta_theta(&truth, &best.key)?;
            rows.push(("delta_theta_deg".into(), format!("{:.4}", dt.to_degrees())));
            rows.push(("rank_qnn".into(), format!("{:.4}", anonymity_rank(dt, RankMode::Quaternion))));
        }
        Ok(render(&rows, a.format))
    };
    let text = with_workers(a.workers, run)?;
    emit(a.out.as_deref(), &text)
}

fn render(rows: &[(String, String)], format: Format) -> String {
    let mut s = String::new();
    for (k, v) in rows {
        let _ = match format {
            Format::Kv => writeln!(s, "{k}={v}"),
            Format::Table => writeln!(s, "{k:<20} {v}"),
        };
    }
    s
}

fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> CliResult<T> + Send) -> CliResult<T> {
    if workers == 0 {
        return f();
    }
    let pool = rayon_pool(workers)?;
    pool.install(f)
}

fn rayon_pool(workers: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(|e| config(format!("cannot start {workers} workers: {e}")))
}

fn bench(a: BenchArgs) -> CliResult<()> {
    match a.mode {
        BenchMode::Rank => {
            let deg = a.dtheta_deg.ok_or_else(|| config("--dtheta-deg is required for rank mode"))?;
            if !(deg > 0.0 && deg <= 180.0) {
                return Err(config("--dtheta-deg must be in (0, 180]"));
            }
            let mode = match a.rank_mode {
                RankModeArg::Quaternion => RankMode::Quaternion,
                RankModeArg::Complex => RankMode::Complex,
            };
            let r = anonymity_rank(deg.to_radians(), mode);
            emit(a.out.as_deref(), &format!("{r:.1}\n"))
        }
        BenchMode::Roundtrip => {
            let net = load_net(require_some(&a.net, "net")?)?;
            let image = load_image(require_some(&a.image, "image")?)?;
            let dec = load_feature(require_some(&a.decrypted, "decrypted")?)?;
            let want = net.encode_features(std::slice::from_ref(&image))?.remove(0);
            if dec.shape() != want.shape() {
                return Err(config(format!("decrypted plane {:?} does not match feature shape {:?}", dec.shape(), want.shape())));
            }
            let err = dec.plane(1).iter().zip(want.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            let pass = err <= a.tolerance;
            let rows = vec![
                ("max_abs_error".to_string(), format!("{err:.3e}")),
                ("tolerance".into(), format!("{:.1e}", a.tolerance)),
                ("result".into(), if pass { "PASS" } else { "FAIL" }.into()),
            ];
            emit(a.out.as_deref(), &render(&rows, a.format))?;
            if pass {
                Ok(())
            } else {
                Err(Failure::Check(format!("round trip error {err:.3e} exceeds {:.1e}", a.tolerance)))
            }
        }
        BenchMode::Attack => {
            let net = load_net(require_some(&a.net, "net")?)?;
            let public = load_data(require_some(&a.public, "public")?)?;
            let test = load_data(require_some(&a.test, "test")?)?;
            let k_values = a
                .k
                .split(',')
                .map(|s| s.trim().parse::<usize>().map_err(|_| config(format!("bad --k entry {s:?}"))))
                .collect::<CliResult<Vec<_>>>()?;
            let cfg = BenchConfig {
                n_features: a.features,
                n_candidates: a.candidates,
                knn_train: a.knn_train,
                k_values,
                attribute: a.attribute,
                raw_attacker: !a.no_raw,
                seed: a.seed,
                workers: a.workers,
                ..BenchConfig::default()
            };
            let report = run_benchmark(&net, &public, &test, &cfg)?;
            let text = match a.format {
                Format::Table => report.to_table(),
                Format::Kv => report.to_kv(),
            };
            emit(a.out.as_deref(), &text)
        }
    }
}

fn gradcheck(a: GradcheckArgs) -> CliResult<()> {
    let net = match &a.net {
        Some(p) => load_net(p)?,
        None => NetworkSpec::reference(Mode::Qnn, &Topology { input_shape: vec![1, 8, 8], encoder_channels: 2, processing_channels: 3, ..Topology::default() }, a.seed)?,
    };
    let (images, labels) = match &a.data {
        Some(p) => {
            let d = load_data(p)?;
            let d: Vec<LabeledImage> = d.into_iter().take(a.samples).collect();
            pixels_and_labels(&d)
        }
        None => {
            let side = net.input_shape[1];
            let d = generate_shapes(a.samples, side, a.seed)?;
            let (x, _) = pixels_and_labels(&d);
            (x, d.iter().map(|l| l.class_label % net.class_count).collect())
        }
    };
    let mut lines = Vec::new();
    let mut ok = true;
    let whole = finite_diff_check(&net, &images, &labels, a.seed, a.step, a.tolerance, a.probes)?;
    for b in &whole.blocks {
        lines.push((format!("network/{}", b.name), b.max_rel_err, b.checked, b.excluded));
    }
    ok &= whole.passed();
    let mut layer_cases: Vec<(String, LayerSpec, Vec<usize>, usize)> = Vec::new();
    let mut rng_seed = a.seed;
    let mut next = || {
        rng_seed = rng_seed.wrapping_add(1);
        rng_seed
    };
    let conv = |seed: u64| LayerSpec::Conv { weight: probe_weights(vec![3, 3, 3, 3], seed), stride: 1, pad: 1 };
    layer_cases.push(("conv".into(), conv(next()), vec![3, 4, 4], 4));
    layer_cases.push(("fully_connected".into(), LayerSpec::FullyConnected { weight: probe_weights(vec![5, 12], next()) }, vec![12], 4));
    layer_cases.push(("qrelu".into(), LayerSpec::QRelu { c: 1.0 }, vec![3, 4, 4], 4));
    layer_cases.push(("qbatchnorm".into(), LayerSpec::QBatchNorm { eps: 1e-5, running: None }, vec![3, 4, 4], 4));
    layer_cases.push(("maxpool".into(), LayerSpec::MaxPool { window: 2, stride: 2 }, vec![3, 4, 4], 4));
    layer_cases.push(("avgpool".into(), LayerSpec::AvgPool { window: 2, stride: 2 }, vec![3, 4, 4], 4));
    layer_cases.push(("dropout".into(), LayerSpec::Dropout { rate: 0.3 }, vec![3, 4, 4], 4));
    layer_cases.push(("residual".into(), LayerSpec::Residual { inner: vec![conv(next()), LayerSpec::QRelu { c: 1.0 }] }, vec![3, 4, 4], 4));
    layer_cases.push(("relu".into(), LayerSpec::Relu, vec![3, 4, 4], 1));
    for (name, layer, shape, planes) in &layer_cases {
        let r = layer_gradcheck(layer, shape, *planes, 3, next(), a.step, a.tolerance)?;
        ok &= r.passed();
        for b in &r.blocks {
            lines.push((format!("{name}/{}", b.name), b.max_rel_err, b.checked, b.excluded));
        }
    }
    let mut s = String::new();
    let _ = writeln!(s, "seed {} step {:e} tolerance {:e}", a.seed, a.step, a.tolerance);
    for (name, err, checked, excluded) in &lines {
        let verdict = if *err <= a.tolerance { "PASS" } else { "FAIL" };
        let _ = writeln!(s, "{verdict} {name:<36} max_rel_err={err:.3e} checked={checked} excluded={excluded}");
    }
    print!("{s}");
    if ok {
        Ok(())
    } else {
        Err(Failure::Check("gradient check failed".into()))
    }
}

/// Deterministic weights in `[−0.5, 0.5)` for the per-layer checks.
fn probe_weights(shape: Vec<usize>, seed: u64) -> RealTensor<f64> {
    RealTensor::from_fn(shape, |i| {
        let x = (i as u64 ^ seed.rotate_left(17)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        (x >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Datagen(a) => datagen(a),
        Command::Train(a) => train(a),
        Command::Keygen(a) => keygen(a),
        Command::Encrypt(a) => encrypt(a),
        Command::Process(a) => process(a),
        Command::Decrypt(a) => decrypt(a),
        Command::Attack(a) => attack(a),
        Command::Bench(a) => bench(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            eprintln!("qnn: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Check(msg)) => {
            eprintln!("qnn: {msg}");
            ExitCode::from(EXIT_CHECK_FAILED)
        }
    }
}
