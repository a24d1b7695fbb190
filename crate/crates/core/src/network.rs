//! Encoder / processing / decoder networks, encryption and decryption, and
//! the network file format.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::layers::{self, stack_output_shape, ForwardCtx, LayerKind, LayerSpec};
use crate::qtensor::{lift, rotate_all, volume, QTensor, RealTensor, Scalar};
use crate::quat::{conjugate, RotationKey};

const MAGIC_LINE: &str = "QNN1";

/// Whether processing runs on quaternion features or on the plain real
/// features of an identically shaped baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Qnn,
    Real,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Qnn => "qnn",
            Mode::Real => "real",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "qnn" => Some(Mode::Qnn),
            "real" => Some(Mode::Real),
            _ => None,
        }
    }

    /// Planes per feature element.
    pub fn planes(self) -> usize {
        match self {
            Mode::Qnn => 4,
            Mode::Real => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub mode: Mode,
    /// `[C, H, W]` of input images.
    pub input_shape: Vec<usize>,
    pub encoder: Vec<LayerSpec>,
    pub processing: Vec<LayerSpec>,
    pub decoder: Vec<LayerSpec>,
    pub class_count: usize,
}

/// Sizes for [`NetworkSpec::reference`].
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub input_shape: Vec<usize>,
    pub encoder_channels: usize,
    pub processing_channels: usize,
    pub class_count: usize,
    pub qrelu_c: f64,
    pub bn_eps: f64,
    /// Zero padding of the encoder convolutions; 0 shrinks features by two
    /// pixels per side.
    pub encoder_pad: usize,
}

impl Default for Topology {
    fn default() -> Self {
        Topology {
            input_shape: vec![1, 16, 16],
            encoder_channels: 4,
            processing_channels: 8,
            class_count: 4,
            qrelu_c: layers::DEFAULT_QRELU_C,
            bn_eps: layers::DEFAULT_BN_EPS,
            encoder_pad: 1,
        }
    }
}

fn he_weight(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> RealTensor<f64> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    RealTensor::from_fn(shape, |_| normal.sample(rng))
}

fn conv3(out_c: usize, in_c: usize, pad: usize, rng: &mut ChaCha8Rng) -> LayerSpec {
    LayerSpec::Conv { weight: he_weight(vec![out_c, in_c, 3, 3], in_c * 9, rng), stride: 1, pad }
}

impl NetworkSpec {
    /// The reference split network: `conv → relu → conv` encoder,
    /// `conv → qrelu → qbatchnorm → maxpool → residual(conv, qrelu)`
    /// processing, and a `flatten → fc → softmax` decoder. The real baseline
    /// uses plain ReLU in place of QReLU.
    pub fn reference(mode: Mode, topo: &Topology, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c, h, w] = match topo.input_shape[..] {
            [c, h, w] => [c, h, w],
            _ => return Err(Error::Config(format!("input shape must be [C, H, W], got {:?}", topo.input_shape))),
        };
        let (e, p) = (topo.encoder_channels, topo.processing_channels);
        let act = || match mode {
            Mode::Qnn => LayerSpec::QRelu { c: topo.qrelu_c },
            Mode::Real => LayerSpec::Relu,
        };
        let ep = topo.encoder_pad;
        let encoder = vec![conv3(e, c, ep, &mut rng), LayerSpec::Relu, conv3(e, e, ep, &mut rng)];
        let shrink = 4 - 4 * ep.min(1);
        if h <= shrink + 1 || w <= shrink + 1 || ep > 1 {
            return Err(Error::Config(format!("encoder padding {ep} does not fit a {h}x{w} input")));
        }
        let (fh, fw) = (h - shrink, w - shrink);
        let processing = vec![
            conv3(p, e, 1, &mut rng),
            act(),
            LayerSpec::QBatchNorm { eps: topo.bn_eps, running: None },
            LayerSpec::MaxPool { window: 2, stride: 2 },
            LayerSpec::Residual { inner: vec![conv3(p, p, 1, &mut rng), act()] },
        ];
        let n = p * (fh / 2) * (fw / 2);
        let decoder = vec![
            LayerSpec::Flatten,
            LayerSpec::FullyConnected { weight: he_weight(vec![topo.class_count, n], n, &mut rng) },
            LayerSpec::Softmax,
        ];
        let net = NetworkSpec { mode, input_shape: vec![c, h, w], encoder, processing, decoder, class_count: topo.class_count };
        net.validate()?;
        Ok(net)
    }

    /// Checks layer parameters, processing equivariance (QNN mode) and that
    /// the three stacks chain to a `[class_count]` output.
    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 {
            return Err(Error::Config("class count must be positive".into()));
        }
        for l in self.encoder.iter().chain(&self.processing).chain(&self.decoder) {
            l.validate()?;
        }
        if self.mode == Mode::Qnn {
            if let Some(bad) = self.processing.iter().find(|l| !l.is_equivariant()) {
                return Err(Error::Config(format!(
                    "processing layer {} is not rotation-equivariant",
                    bad.kind().name()
                )));
            }
        }
        let out = stack_output_shape(&self.decoder, &self.processing_output_shape()?)?;
        if volume(&out) != self.class_count {
            return Err(Error::ShapeMismatch(format!(
                "decoder produces {out:?}, expected {} classes",
                self.class_count
            )));
        }
        Ok(())
    }

    pub fn feature_shape(&self) -> Result<Vec<usize>> {
        stack_output_shape(&self.encoder, &self.input_shape)
    }

    pub fn processing_output_shape(&self) -> Result<Vec<usize>> {
        stack_output_shape(&self.processing, &self.feature_shape()?)
    }

    /// Every weight tensor, encoder first, in traversal order.
    pub fn weights(&self) -> Vec<&RealTensor<f64>> {
        let mut out = Vec::new();
        for l in self.encoder.iter().chain(&self.processing).chain(&self.decoder) {
            l.for_each_weight(&mut |w| out.push(w));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.weights().iter().map(|w| w.len()).sum()
    }

    /// `g(I)` for a batch of images.
    pub fn encode_features<T: Scalar>(&self, images: &[RealTensor<T>]) -> Result<Vec<RealTensor<T>>> {
        for img in images {
            if img.shape() != self.input_shape.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "image shape {:?}, network expects {:?}",
                    img.shape(),
                    self.input_shape
                )));
            }
        }
        layers::forward_real(&self.encoder, images.to_vec(), &mut ForwardCtx::inference())
    }

    /// Decoder applied to a batch of plaintext (or decrypted) features.
    pub fn decode_features<T: Scalar>(&self, feats: Vec<RealTensor<T>>) -> Result<Vec<RealTensor<T>>> {
        layers::forward_real(&self.decoder, feats, &mut ForwardCtx::inference())
    }

    /// Class scores without encryption. In QNN mode the processing stack
    /// sees `0 + a i + b j + c k` unrotated, with the fooling features
    /// taken from `fool1` and `fool2`.
    pub fn plaintext_forward<T: Scalar>(
        &self,
        image: &RealTensor<T>,
        fool1: &RealTensor<T>,
        fool2: &RealTensor<T>,
    ) -> Result<RealTensor<T>> {
        let feats = self.encode_features(&[image.clone(), fool1.clone(), fool2.clone()])?;
        let h = match self.mode {
            Mode::Qnn => {
                let x = lift(&feats[0], &feats[1], &feats[2])?;
                let out = layers::forward_quaternion(&self.processing, vec![x], &mut ForwardCtx::inference())?;
                out[0].project(1)
            }
            Mode::Real => {
                let out = layers::forward_real(&self.processing, vec![feats[0].clone()], &mut ForwardCtx::inference())?;
                out.into_iter().next().expect("one output")
            }
        };
        Ok(self.decode_features(vec![h])?.remove(0))
    }

    fn require_qnn(&self) -> Result<()> {
        if self.mode != Mode::Qnn {
            return Err(Error::Config("operation needs a quaternion network".into()));
        }
        Ok(())
    }
}

/// An encrypted feature. Carries an identifier of its key, never the key.
#[derive(Debug, Clone, PartialEq)]
pub struct EncryptedFeature<T = f32> {
    pub payload: QTensor<T>,
    pub key_id: u64,
}

/// `Ψ_R(g(I))`: encodes the target and two fooling images, lifts them to
/// `0 + a i + b j + c k` and rotates every element by the key's rotor.
pub fn encode<T: Scalar>(
    image: &RealTensor<T>,
    fool1: &RealTensor<T>,
    fool2: &RealTensor<T>,
    net: &NetworkSpec,
    key: &RotationKey,
) -> Result<EncryptedFeature<T>> {
    net.require_qnn()?;
    let feats = net.encode_features(&[image.clone(), fool1.clone(), fool2.clone()])?;
    encrypt_features(&feats[0], &feats[1], &feats[2], key)
}

/// Encryption of already computed features.
pub fn encrypt_features<T: Scalar>(
    a: &RealTensor<T>,
    b: &RealTensor<T>,
    c: &RealTensor<T>,
    key: &RotationKey,
) -> Result<EncryptedFeature<T>> {
    let x = lift(a, b, c)?;
    Ok(EncryptedFeature { payload: rotate_all(key.rotor()?, &x)?, key_id: key.key_id() })
}

/// Runs the processing stack. Takes no key.
pub fn run_processing<T: Scalar>(f: &EncryptedFeature<T>, net: &NetworkSpec) -> Result<EncryptedFeature<T>> {
    Ok(run_processing_batch(std::slice::from_ref(f), net)?.remove(0))
}

/// Processing over a batch; batch-norm layers without stored statistics
/// normalise over this batch.
pub fn run_processing_batch<T: Scalar>(fs: &[EncryptedFeature<T>], net: &NetworkSpec) -> Result<Vec<EncryptedFeature<T>>> {
    net.require_qnn()?;
    let payloads = fs.iter().map(|f| f.payload.clone()).collect();
    let out = layers::forward_quaternion(&net.processing, payloads, &mut ForwardCtx::inference())?;
    Ok(out.into_iter().zip(fs).map(|(payload, f)| EncryptedFeature { payload, key_id: f.key_id }).collect())
}

/// `Im_i(R̄ ∘ h ∘ R)`.
pub fn decrypt_plane<T: Scalar>(h: &QTensor<T>, key: &RotationKey) -> Result<RealTensor<T>> {
    Ok(rotate_all(conjugate(key.rotor()?), h)?.project(1))
}

/// Decrypts and runs the decoder, returning class scores.
pub fn decode<T: Scalar>(h: &EncryptedFeature<T>, key: &RotationKey, net: &NetworkSpec) -> Result<RealTensor<T>> {
    let plane = decrypt_plane(&h.payload, key)?;
    let expected = net.processing_output_shape()?;
    if plane.shape() != expected.as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "feature shape {:?}, decoder expects {expected:?}",
            plane.shape()
        )));
    }
    Ok(net.decode_features(vec![plane])?.remove(0))
}

/// The noisy baseline: `g(I) + γ ε` with standard normal `ε`.
pub fn noisy_baseline_encode<T: Scalar>(image: &RealTensor<T>, net: &NetworkSpec, gamma: f64, seed: u64) -> Result<RealTensor<T>> {
    if !(gamma >= 0.0) {
        return Err(Error::Config(format!("noise scale must be non-negative, got {gamma}")));
    }
    let a = net.encode_features(std::slice::from_ref(image))?.remove(0);
    if gamma == 0.0 {
        return Ok(a);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = a
        .data()
        .iter()
        .map(|&v| {
            let e: f64 = StandardNormal.sample(&mut rng);
            v + T::of(gamma * e)
        })
        .collect();
    RealTensor::new(a.shape().to_vec(), data)
}

fn layer_line(l: &LayerSpec, out: &mut String) {
    let name = l.kind().name();
    match l {
        LayerSpec::Conv { weight, stride, pad } => {
            let s = weight.shape();
            let _ = writeln!(out, "{name} out={} in={} kh={} kw={} stride={stride} pad={pad}", s[0], s[1], s[2], s[3]);
        }
        LayerSpec::FullyConnected { weight } => {
            let _ = writeln!(out, "{name} out={} in={}", weight.shape()[0], weight.shape()[1]);
        }
        LayerSpec::QRelu { c } => {
            let _ = writeln!(out, "{name} c={c:e}");
        }
        LayerSpec::QBatchNorm { eps, running } => match running {
            Some(stats) => {
                let dims: Vec<String> = stats.shape().iter().map(|d| d.to_string()).collect();
                let _ = writeln!(out, "{name} eps={eps:e} stats={}", dims.join("x"));
            }
            None => {
                let _ = writeln!(out, "{name} eps={eps:e}");
            }
        },
        LayerSpec::MaxPool { window, stride } | LayerSpec::AvgPool { window, stride } => {
            let _ = writeln!(out, "{name} window={window} stride={stride}");
        }
        LayerSpec::Dropout { rate } => {
            let _ = writeln!(out, "{name} rate={rate:e}");
        }
        LayerSpec::Residual { inner } => {
            out.push_str("residual\n");
            inner.iter().for_each(|l| layer_line(l, out));
            out.push_str("end\n");
        }
        LayerSpec::Upsample { factor } => {
            let _ = writeln!(out, "{name} factor={factor}");
        }
        LayerSpec::Relu | LayerSpec::Sigmoid | LayerSpec::Flatten | LayerSpec::Softmax => {
            let _ = writeln!(out, "{name}");
        }
    }
}

fn push_blob(l: &LayerSpec, blob: &mut Vec<u8>) {
    match l {
        LayerSpec::Conv { weight, .. } | LayerSpec::FullyConnected { weight } => {
            weight.data().iter().for_each(|v| blob.extend(v.to_le_bytes()));
        }
        LayerSpec::QBatchNorm { running: Some(stats), .. } => {
            stats.data().iter().for_each(|v| blob.extend(v.to_le_bytes()));
        }
        LayerSpec::Residual { inner } => inner.iter().for_each(|l| push_blob(l, blob)),
        _ => {}
    }
}

impl NetworkSpec {
    /// Text header (one layer per line) followed by `weights <bytes>` and a
    /// little-endian `f64` blob of weights and batch-norm statistics in
    /// traversal order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = String::new();
        let dims: Vec<String> = self.input_shape.iter().map(|d| d.to_string()).collect();
        let _ = write!(
            head,
            "{MAGIC_LINE}\nmode {}\nclasses {}\ninput {}\n",
            self.mode.name(),
            self.class_count,
            dims.join(" ")
        );
        let mut blob = Vec::new();
        for (section, stack) in [("encoder", &self.encoder), ("processing", &self.processing), ("decoder", &self.decoder)] {
            let _ = writeln!(head, "{section}");
            for l in stack {
                layer_line(l, &mut head);
                push_blob(l, &mut blob);
            }
        }
        let _ = writeln!(head, "weights {}", blob.len());
        let mut out = head.into_bytes();
        out.extend(blob);
        out
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = BufReader::new(bytes);
        let mut line = String::new();
        let mut next_line = |reader: &mut BufReader<&[u8]>| -> Result<Option<String>> {
            line.clear();
            if reader.read_line(&mut line).map_err(|_| Error::Corrupt("header is not UTF-8".into()))? == 0 {
                return Ok(None);
            }
            Ok(Some(line.trim_end_matches('\n').to_string()))
        };
        let magic = next_line(&mut reader)?.ok_or(Error::Corrupt("empty network file".into()))?;
        if magic != MAGIC_LINE {
            if magic.starts_with("QNN") {
                return Err(Error::Version(format!("network file version {magic:?}, expected {MAGIC_LINE:?}")));
            }
            return Err(Error::BadMagic { expected: MAGIC_LINE.into(), found: magic.chars().take(8).collect() });
        }
        let mut header = Vec::new();
        let blob_len = loop {
            let l = next_line(&mut reader)?.ok_or(Error::Corrupt("missing weights line".into()))?;
            if let Some(n) = l.strip_prefix("weights ") {
                break n.parse::<usize>().map_err(|_| Error::Corrupt(format!("bad weights line {l:?}")))?;
            }
            header.push(l);
        };
        let mut blob = Vec::new();
        reader.read_to_end(&mut blob)?;
        if blob.len() != blob_len {
            return Err(Error::Corrupt(format!("weight blob has {} bytes, header says {blob_len}", blob.len())));
        }
        if blob_len % 8 != 0 {
            return Err(Error::Corrupt("weight blob is not a whole number of f64 values".into()));
        }
        let values: Vec<f64> = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let net = parse_header(&header, &values)?;
        net.validate()?;
        Ok(net)
    }
}

struct HeaderParser<'a> {
    lines: &'a [String],
    pos: usize,
    values: &'a [f64],
    vpos: usize,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Corrupt(msg.into())
}

impl HeaderParser<'_> {
    fn peek(&self) -> Option<&str> {
        self.lines.get(self.pos).map(String::as_str)
    }

    fn take_values(&mut self, n: usize) -> Result<Vec<f64>> {
        if self.vpos + n > self.values.len() {
            return Err(corrupt("weight blob is shorter than the topology requires"));
        }
        let out = self.values[self.vpos..self.vpos + n].to_vec();
        self.vpos += n;
        Ok(out)
    }

    fn keyword(&mut self, word: &str) -> Result<()> {
        match self.peek() {
            Some(l) if l == word => {
                self.pos += 1;
                Ok(())
            }
            other => Err(corrupt(format!("expected {word:?}, found {other:?}"))),
        }
    }

    fn header_value(&mut self, key: &str) -> Result<String> {
        let l = self.peek().ok_or_else(|| corrupt(format!("missing {key} line")))?;
        let v = l.strip_prefix(key).and_then(|r| r.strip_prefix(' ')).ok_or_else(|| corrupt(format!("expected {key} line, found {l:?}")))?;
        let v = v.to_string();
        self.pos += 1;
        Ok(v)
    }

    fn stack(&mut self, terminators: &[&str]) -> Result<Vec<LayerSpec>> {
        let mut out = Vec::new();
        while let Some(l) = self.peek() {
            if terminators.contains(&l) {
                break;
            }
            let l = l.to_string();
            self.pos += 1;
            out.push(self.layer(&l)?);
        }
        Ok(out)
    }

    fn layer(&mut self, line: &str) -> Result<LayerSpec> {
        let mut words = line.split_whitespace();
        let name = words.next().ok_or_else(|| corrupt("empty layer line"))?;
        let kind = LayerKind::from_name(name).ok_or_else(|| corrupt(format!("unknown layer kind {name:?}")))?;
        let params: Vec<(&str, &str)> = words
            .map(|w| w.split_once('=').ok_or_else(|| corrupt(format!("bad parameter {w:?}"))))
            .collect::<Result<_>>()?;
        let get = |k: &str| -> Result<&str> {
            params.iter().find(|(n, _)| *n == k).map(|(_, v)| *v).ok_or_else(|| corrupt(format!("{name} is missing {k}")))
        };
        let usize_of = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| corrupt(format!("bad {k} in {line:?}"))) };
        let f64_of = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| corrupt(format!("bad {k} in {line:?}"))) };
        Ok(match kind {
            LayerKind::Conv => {
                let shape = vec![usize_of("out")?, usize_of("in")?, usize_of("kh")?, usize_of("kw")?];
                let data = self.take_values(volume(&shape))?;
                LayerSpec::Conv { weight: RealTensor::new(shape, data)?, stride: usize_of("stride")?, pad: usize_of("pad")? }
            }
            LayerKind::FullyConnected => {
                let shape = vec![usize_of("out")?, usize_of("in")?];
                let data = self.take_values(volume(&shape))?;
                LayerSpec::FullyConnected { weight: RealTensor::new(shape, data)? }
            }
            LayerKind::QRelu => LayerSpec::QRelu { c: f64_of("c")? },
            LayerKind::QBatchNorm => {
                let running = match get("stats") {
                    Ok(dims) => {
                        let shape: Vec<usize> = dims
                            .split('x')
                            .map(|d| d.parse().map_err(|_| corrupt(format!("bad stats shape {dims:?}"))))
                            .collect::<Result<_>>()?;
                        let data = self.take_values(volume(&shape))?;
                        Some(RealTensor::new(shape, data)?)
                    }
                    Err(_) => None,
                };
                LayerSpec::QBatchNorm { eps: f64_of("eps")?, running }
            }
            LayerKind::MaxPool => LayerSpec::MaxPool { window: usize_of("window")?, stride: usize_of("stride")? },
            LayerKind::AvgPool => LayerSpec::AvgPool { window: usize_of("window")?, stride: usize_of("stride")? },
            LayerKind::Dropout => LayerSpec::Dropout { rate: f64_of("rate")? },
            LayerKind::Residual => {
                let inner = self.stack(&["end"])?;
                self.keyword("end")?;
                LayerSpec::Residual { inner }
            }
            LayerKind::Relu => LayerSpec::Relu,
            LayerKind::Sigmoid => LayerSpec::Sigmoid,
            LayerKind::Flatten => LayerSpec::Flatten,
            LayerKind::Upsample => LayerSpec::Upsample { factor: usize_of("factor")? },
            LayerKind::Softmax => LayerSpec::Softmax,
        })
    }
}

fn parse_header(lines: &[String], values: &[f64]) -> Result<NetworkSpec> {
    let mut p = HeaderParser { lines, pos: 0, values, vpos: 0 };
    let mode_name = p.header_value("mode")?;
    let mode = Mode::from_name(&mode_name).ok_or_else(|| corrupt(format!("unknown mode {mode_name:?}")))?;
    let class_count = p.header_value("classes")?.parse().map_err(|_| corrupt("bad class count"))?;
    let input_shape: Vec<usize> = p
        .header_value("input")?
        .split_whitespace()
        .map(|d| d.parse().map_err(|_| corrupt("bad input shape")))
        .collect::<Result<_>>()?;
    p.keyword("encoder")?;
    let encoder = p.stack(&["processing"])?;
    p.keyword("processing")?;
    let processing = p.stack(&["decoder"])?;
    p.keyword("decoder")?;
    let decoder = p.stack(&[])?;
    if p.vpos != values.len() {
        return Err(corrupt("weight blob is longer than the topology requires"));
    }
    Ok(NetworkSpec { mode, input_shape, encoder, processing, decoder, class_count })
}
