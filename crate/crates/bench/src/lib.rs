//! Random workloads shared by the benchmarks and the acceptance suite:
//! layers, stacks and quaternion tensors, plus an equivariance probe.

use qnn_core::layers::{forward_quaternion, ForwardCtx};
use qnn_core::qtensor::rotate_all;
use qnn_core::quat::sample_rotation_from;
use qnn_core::{LayerKind, LayerSpec, QTensor, RealTensor, Result, RotationKey, Scalar};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// The rotation-equivariant layer kinds, in a fixed order.
pub const EQUIVARIANT_KINDS: [LayerKind; 8] = [
    LayerKind::Conv,
    LayerKind::FullyConnected,
    LayerKind::QRelu,
    LayerKind::QBatchNorm,
    LayerKind::MaxPool,
    LayerKind::AvgPool,
    LayerKind::Dropout,
    LayerKind::Residual,
];

pub fn random_real(shape: Vec<usize>, scale: f64, rng: &mut ChaCha8Rng) -> RealTensor<f64> {
    RealTensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// A pure quaternion tensor with planes uniform in `[−1, 1]`.
pub fn random_pure<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> QTensor<T> {
    let n: usize = shape.iter().product();
    let mut plane = |zero: bool| -> Vec<T> { (0..n).map(|_| T::of(if zero { 0.0 } else { rng.random_range(-1.0..1.0) })).collect() };
    let planes = [plane(true), plane(false), plane(false), plane(false)];
    QTensor::new(shape.to_vec(), planes).expect("plane lengths match the shape")
}

fn conv(out_c: usize, in_c: usize, rng: &mut ChaCha8Rng) -> LayerSpec {
    let scale = (3.0 / (in_c * 9) as f64).sqrt();
    LayerSpec::Conv { weight: random_real(vec![out_c, in_c, 3, 3], scale, rng), stride: 1, pad: 1 }
}

/// One layer of `kind` for `[c, h, w]` inputs. Everything except
/// fully-connected and pooling layers keeps the shape.
pub fn random_layer(kind: LayerKind, c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> LayerSpec {
    match kind {
        LayerKind::Conv => conv(c, c, rng),
        LayerKind::FullyConnected => {
            let n = c * h * w;
            LayerSpec::FullyConnected { weight: random_real(vec![rng.random_range(2..6), n], (3.0 / n as f64).sqrt(), rng) }
        }
        LayerKind::QRelu => LayerSpec::QRelu { c: rng.random_range(0.3..1.5) },
        LayerKind::QBatchNorm => LayerSpec::QBatchNorm { eps: 1e-5, running: None },
        LayerKind::MaxPool => LayerSpec::MaxPool { window: 2, stride: 2 },
        LayerKind::AvgPool => LayerSpec::AvgPool { window: 2, stride: 2 },
        LayerKind::Dropout => LayerSpec::Dropout { rate: rng.random_range(0.1..0.6) },
        LayerKind::Residual => LayerSpec::Residual { inner: vec![conv(c, c, rng), LayerSpec::QRelu { c: 1.0 }] },
        other => panic!("{} is not an equivariant layer", other.name()),
    }
}

/// A stack of `depth` equivariant layers for `[c, h, w]` inputs. Pooling is
/// used while the map is at least 2×2; a fully-connected layer may only
/// come last.
pub fn random_stack(depth: usize, c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<LayerSpec> {
    let (mut h, mut w) = (h, w);
    let mut layers = Vec::with_capacity(depth);
    for i in 0..depth {
        let last = i + 1 == depth;
        let kind = loop {
            let k = EQUIVARIANT_KINDS[rng.random_range(0..EQUIVARIANT_KINDS.len())];
            let pool = matches!(k, LayerKind::MaxPool | LayerKind::AvgPool);
            if (k == LayerKind::FullyConnected && !last) || (pool && (h < 2 || w < 2)) {
                continue;
            }
            break k;
        };
        if matches!(kind, LayerKind::MaxPool | LayerKind::AvgPool) {
            h /= 2;
            w /= 2;
        }
        layers.push(random_layer(kind, c, h.max(1), w.max(1), rng));
    }
    layers
}

/// Relative error between `Φ(R x R̄)` and `R Φ(x) R̄` over a batch, with the
/// same dropout draws on both sides.
pub fn equivariance_error<T: Scalar>(layers: &[LayerSpec], batch: &[QTensor<T>], key: &RotationKey, seed: u64) -> Result<f64> {
    let r = key.rotor()?;
    let rotated: Vec<QTensor<T>> = batch.iter().map(|x| rotate_all(r, x)).collect::<Result<_>>()?;
    let lhs = forward_quaternion(layers, rotated, &mut ForwardCtx::training(seed))?;
    let plain = forward_quaternion(layers, batch.to_vec(), &mut ForwardCtx::training(seed))?;
    let mut worst: f64 = 0.0;
    for (l, p) in lhs.iter().zip(&plain) {
        worst = worst.max(l.relative_error(&rotate_all(r, p)?));
    }
    Ok(worst)
}

pub fn random_key(rng: &mut ChaCha8Rng) -> RotationKey {
    sample_rotation_from(rng)
}
