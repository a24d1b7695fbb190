//! Rotation-equivariant layers and their real-valued counterparts.
//!
//! Every layer in the equivariant set satisfies
//! `L(R∘f∘R̄) = R∘L(f)∘R̄` for any unit rotor `R`: linear layers use real
//! weights only and carry no bias, and every nonlinearity depends on an
//! element only through its quaternion norm.
//!
//! The same [`LayerSpec`] also runs on real tensors (encoder, decoder and
//! attacker networks). There a tensor is treated as a one-plane feature, so
//! the norm of an element is its absolute value.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, PoolGeom};
use crate::qtensor::{volume, QTensor, RealTensor, Scalar};

pub const DEFAULT_QRELU_C: f64 = 1.0;
pub const DEFAULT_BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    FullyConnected,
    QRelu,
    QBatchNorm,
    MaxPool,
    AvgPool,
    Dropout,
    Residual,
    Relu,
    Sigmoid,
    Flatten,
    Upsample,
    Softmax,
}

impl LayerKind {
    /// Whether the kind belongs to the rotation-equivariant set usable in a
    /// processing module.
    pub fn is_equivariant(self) -> bool {
        use LayerKind::*;
        matches!(
            self,
            Conv | FullyConnected | QRelu | QBatchNorm | MaxPool | AvgPool | Dropout | Residual
        )
    }

    pub fn name(self) -> &'static str {
        use LayerKind::*;
        match self {
            Conv => "conv",
            FullyConnected => "fc",
            QRelu => "qrelu",
            QBatchNorm => "qbatchnorm",
            MaxPool => "maxpool",
            AvgPool => "avgpool",
            Dropout => "dropout",
            Residual => "residual",
            Relu => "relu",
            Sigmoid => "sigmoid",
            Flatten => "flatten",
            Upsample => "upsample",
            Softmax => "softmax",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        use LayerKind::*;
        Some(match name {
            "conv" => Conv,
            "fc" => FullyConnected,
            "qrelu" => QRelu,
            "qbatchnorm" => QBatchNorm,
            "maxpool" => MaxPool,
            "avgpool" => AvgPool,
            "dropout" => Dropout,
            "residual" => Residual,
            "relu" => Relu,
            "sigmoid" => Sigmoid,
            "flatten" => Flatten,
            "upsample" => Upsample,
            "softmax" => Softmax,
            _ => return None,
        })
    }
}

/// One layer with its hyperparameters and (for `Conv`/`FullyConnected`)
/// real weights. Linear layers have no bias.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    /// Weight `[out, in, kh, kw]`.
    Conv { weight: RealTensor<f64>, stride: usize, pad: usize },
    /// Weight `[out, in]`; the input is flattened first.
    FullyConnected { weight: RealTensor<f64> },
    QRelu { c: f64 },
    /// `running` holds a moving average of `E‖f_v‖²` per element, used
    /// outside training once available.
    QBatchNorm { eps: f64, running: Option<RealTensor<f64>> },
    MaxPool { window: usize, stride: usize },
    AvgPool { window: usize, stride: usize },
    Dropout { rate: f64 },
    /// `f + Φ(f)` with `Φ` the inner stack.
    Residual { inner: Vec<LayerSpec> },
    Relu,
    Sigmoid,
    Flatten,
    Upsample { factor: usize },
    Softmax,
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::Conv { .. } => LayerKind::Conv,
            LayerSpec::FullyConnected { .. } => LayerKind::FullyConnected,
            LayerSpec::QRelu { .. } => LayerKind::QRelu,
            LayerSpec::QBatchNorm { .. } => LayerKind::QBatchNorm,
            LayerSpec::MaxPool { .. } => LayerKind::MaxPool,
            LayerSpec::AvgPool { .. } => LayerKind::AvgPool,
            LayerSpec::Dropout { .. } => LayerKind::Dropout,
            LayerSpec::Residual { .. } => LayerKind::Residual,
            LayerSpec::Relu => LayerKind::Relu,
            LayerSpec::Sigmoid => LayerKind::Sigmoid,
            LayerSpec::Flatten => LayerKind::Flatten,
            LayerSpec::Upsample { .. } => LayerKind::Upsample,
            LayerSpec::Softmax => LayerKind::Softmax,
        }
    }

    pub fn qrelu() -> Self {
        LayerSpec::QRelu { c: DEFAULT_QRELU_C }
    }

    pub fn qbatchnorm() -> Self {
        LayerSpec::QBatchNorm { eps: DEFAULT_BN_EPS, running: None }
    }

    /// True if this layer and everything nested in it is equivariant.
    pub fn is_equivariant(&self) -> bool {
        match self {
            LayerSpec::Residual { inner } => inner.iter().all(LayerSpec::is_equivariant),
            other => other.kind().is_equivariant(),
        }
    }

    /// Checks hyperparameter ranges and weight ranks.
    pub fn validate(&self) -> Result<()> {
        match self {
            LayerSpec::Conv { weight, stride, .. } => {
                if weight.shape().len() != 4 || *stride == 0 {
                    return Err(Error::Config(format!(
                        "conv needs a rank-4 weight and positive stride, got {:?} / {stride}",
                        weight.shape()
                    )));
                }
            }
            LayerSpec::FullyConnected { weight } => {
                if weight.shape().len() != 2 {
                    return Err(Error::Config(format!(
                        "fully connected layer needs a rank-2 weight, got {:?}",
                        weight.shape()
                    )));
                }
            }
            LayerSpec::QRelu { c } => {
                if !(*c > 0.0 && c.is_finite()) {
                    return Err(Error::Config(format!("qrelu constant must be positive, got {c}")));
                }
            }
            LayerSpec::QBatchNorm { eps, .. } => {
                if !(*eps > 0.0 && eps.is_finite()) {
                    return Err(Error::Config(format!("batch-norm epsilon must be positive, got {eps}")));
                }
            }
            LayerSpec::MaxPool { window, stride } | LayerSpec::AvgPool { window, stride } => {
                if *window == 0 || *stride == 0 {
                    return Err(Error::Config("pool window and stride must be positive".into()));
                }
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
                }
            }
            LayerSpec::Residual { inner } => inner.iter().try_for_each(LayerSpec::validate)?,
            LayerSpec::Upsample { factor } => {
                if *factor == 0 {
                    return Err(Error::Config("upsample factor must be positive".into()));
                }
            }
            LayerSpec::Relu | LayerSpec::Sigmoid | LayerSpec::Flatten | LayerSpec::Softmax => {}
        }
        Ok(())
    }

    /// Output shape for an input of shape `input`.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            LayerSpec::Conv { weight, stride, pad } => {
                let geom = conv_geom(weight, *stride, *pad, input)?;
                Ok(vec![geom.out_c, geom.out_h(), geom.out_w()])
            }
            LayerSpec::FullyConnected { weight } => {
                let [out, n] = [weight.shape()[0], weight.shape()[1]];
                if volume(input) != n {
                    return Err(Error::ShapeMismatch(format!(
                        "fully connected layer expects {n} inputs, got shape {input:?}"
                    )));
                }
                Ok(vec![out])
            }
            LayerSpec::MaxPool { window, stride } | LayerSpec::AvgPool { window, stride } => {
                let g = pool_geom(*window, *stride, input)?;
                Ok(vec![g.c, g.out_h(), g.out_w()])
            }
            LayerSpec::QBatchNorm { running: Some(stats), .. } => {
                if stats.shape() != input {
                    return Err(Error::ShapeMismatch(format!(
                        "batch-norm statistics {:?} for input {input:?}",
                        stats.shape()
                    )));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Residual { inner } => {
                let out = stack_output_shape(inner, input)?;
                if out != input {
                    return Err(Error::ShapeMismatch(format!(
                        "residual branch maps {input:?} to {out:?}"
                    )));
                }
                Ok(out)
            }
            LayerSpec::Flatten => Ok(vec![volume(input)]),
            LayerSpec::Upsample { factor } => match input {
                [c, h, w] => Ok(vec![*c, h * factor, w * factor]),
                _ => Err(Error::ShapeMismatch(format!("upsample needs [C, H, W], got {input:?}"))),
            },
            _ => Ok(input.to_vec()),
        }
    }

    /// Visits every weight tensor in traversal order.
    pub fn for_each_weight<'a>(&'a self, f: &mut impl FnMut(&'a RealTensor<f64>)) {
        match self {
            LayerSpec::Conv { weight, .. } | LayerSpec::FullyConnected { weight } => f(weight),
            LayerSpec::Residual { inner } => inner.iter().for_each(|l| l.for_each_weight(f)),
            _ => {}
        }
    }

    pub fn for_each_weight_mut(&mut self, f: &mut impl FnMut(&mut RealTensor<f64>)) {
        match self {
            LayerSpec::Conv { weight, .. } | LayerSpec::FullyConnected { weight } => f(weight),
            LayerSpec::Residual { inner } => inner.iter_mut().for_each(|l| l.for_each_weight_mut(f)),
            _ => {}
        }
    }

    /// Visits every batch-norm statistics slot in traversal order.
    pub fn for_each_bn_mut(&mut self, f: &mut impl FnMut(&mut Option<RealTensor<f64>>)) {
        match self {
            LayerSpec::QBatchNorm { running, .. } => f(running),
            LayerSpec::Residual { inner } => inner.iter_mut().for_each(|l| l.for_each_bn_mut(f)),
            _ => {}
        }
    }
}

pub fn stack_output_shape(layers: &[LayerSpec], input: &[usize]) -> Result<Vec<usize>> {
    layers.iter().try_fold(input.to_vec(), |shape, l| l.output_shape(&shape))
}

pub(crate) fn conv_geom(weight: &RealTensor<f64>, stride: usize, pad: usize, input: &[usize]) -> Result<ConvGeom> {
    let ws = weight.shape();
    let [c, h, w] = match input {
        [c, h, w] => [*c, *h, *w],
        _ => return Err(Error::ShapeMismatch(format!("conv needs [C, H, W] input, got {input:?}"))),
    };
    if ws.len() != 4 || ws[1] != c {
        return Err(Error::ShapeMismatch(format!(
            "conv weight {ws:?} does not accept {c} input channels"
        )));
    }
    let geom = ConvGeom { in_c: c, in_h: h, in_w: w, out_c: ws[0], kh: ws[2], kw: ws[3], stride, pad };
    geom.validate()?;
    Ok(geom)
}

pub(crate) fn pool_geom(window: usize, stride: usize, input: &[usize]) -> Result<PoolGeom> {
    let g = match input {
        [c, h, w] => PoolGeom { c: *c, h: *h, w: *w, window, stride },
        _ => return Err(Error::ShapeMismatch(format!("pooling needs [C, H, W] input, got {input:?}"))),
    };
    g.validate()?;
    Ok(g)
}

/// Selection mask of a max-pool: one `true` per pooling window, at the
/// element of largest norm.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolMask {
    shape: Vec<usize>,
    selected: Vec<usize>,
}

impl PoolMask {
    /// Input indices chosen per output element.
    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Dense binary mask over the input extents.
    pub fn to_binary(&self) -> Vec<u8> {
        let mut m = vec![0u8; volume(&self.shape)];
        for &i in &self.selected {
            m[i] = 1;
        }
        m
    }
}

/// Forward state shared across a stack: training flag and the dropout RNG.
pub struct ForwardCtx {
    pub training: bool,
    pub rng: ChaCha8Rng,
}

impl ForwardCtx {
    pub fn inference() -> Self {
        use rand::SeedableRng;
        ForwardCtx { training: false, rng: ChaCha8Rng::seed_from_u64(0) }
    }

    pub fn training(seed: u64) -> Self {
        use rand::SeedableRng;
        ForwardCtx { training: true, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

fn map_each_plane<T: Scalar>(
    f: &QTensor<T>,
    out_shape: Vec<usize>,
    mut op: impl FnMut(&[T]) -> Vec<T>,
) -> Result<QTensor<T>> {
    let planes = [op(f.plane(0)), op(f.plane(1)), op(f.plane(2)), op(f.plane(3))];
    QTensor::new(out_shape, planes)
}

/// Convolution or fully-connected layer: the same real kernel on each plane.
pub fn qconv_forward<T: Scalar>(f: &QTensor<T>, spec: &LayerSpec) -> Result<QTensor<T>> {
    match spec {
        LayerSpec::Conv { weight, stride, pad } => {
            let geom = conv_geom(weight, *stride, *pad, f.shape())?;
            let w: Vec<T> = weight.data().iter().map(|&v| T::of(v)).collect();
            map_each_plane(f, vec![geom.out_c, geom.out_h(), geom.out_w()], |x| {
                let mut out = vec![T::zero(); geom.out_len()];
                kernels::conv2d_forward(&geom, x, &w, &mut out);
                out
            })
        }
        LayerSpec::FullyConnected { weight } => {
            let out_shape = spec.output_shape(f.shape())?;
            let w: Vec<T> = weight.data().iter().map(|&v| T::of(v)).collect();
            map_each_plane(f, out_shape.clone(), |x| {
                let mut out = vec![T::zero(); out_shape[0]];
                kernels::matvec(&w, x, &mut out);
                out
            })
        }
        other => Err(Error::Config(format!("{} is not a linear layer", other.kind().name()))),
    }
}

/// `f_v ↦ ‖f_v‖ / max(‖f_v‖, C) · f_v`.
pub fn qrelu_forward<T: Scalar>(f: &QTensor<T>, c: f64) -> QTensor<T> {
    let c = T::of(c);
    let mut out = f.clone();
    for v in 0..f.len() {
        let n = element_norm(f, v);
        let scale = n / n.max(c);
        for p in 0..4 {
            out.plane_mut(p)[v] = f.plane(p)[v] * scale;
        }
    }
    out
}

fn element_norm<T: Scalar>(f: &QTensor<T>, v: usize) -> T {
    let sq = |p: usize| f.plane(p)[v] * f.plane(p)[v];
    // Grouped so that exchanging the j and k planes is bit-exact.
    ((sq(0) + sq(1)) + (sq(2) + sq(3))).sqrt()
}

/// Batch statistics `E_k ‖f_v^(k)‖²` per element.
pub fn batch_mean_square<T: Scalar>(batch: &[QTensor<T>]) -> Result<RealTensor<T>> {
    let first = batch.first().ok_or(Error::Empty("batch-norm batch"))?;
    let n = first.len();
    let mut acc = vec![T::zero(); n];
    for f in batch {
        first.check_same_shape(f)?;
        for (v, a) in acc.iter_mut().enumerate() {
            let e = element_norm(f, v);
            *a = *a + e * e;
        }
    }
    let inv = T::of(1.0 / batch.len() as f64);
    acc.iter_mut().for_each(|a| *a = *a * inv);
    RealTensor::new(first.shape().to_vec(), acc)
}

/// `f_v^(k) / sqrt(E_k' ‖f_v^(k')‖² + ε)` over the batch.
///
/// `eps = 0` is accepted here (the scale-invariance check uses it); layer
/// specs require a positive epsilon.
pub fn qbatchnorm_forward<T: Scalar>(batch: &[QTensor<T>], eps: f64) -> Result<Vec<QTensor<T>>> {
    let stats = batch_mean_square(batch)?;
    batch.iter().map(|f| qbatchnorm_with_stats(f, &stats, eps)).collect()
}

/// Batch-norm with fixed per-element mean-square statistics.
pub fn qbatchnorm_with_stats<T: Scalar>(f: &QTensor<T>, stats: &RealTensor<T>, eps: f64) -> Result<QTensor<T>> {
    if stats.shape() != f.shape() {
        return Err(Error::ShapeMismatch(format!(
            "statistics {:?} for feature {:?}",
            stats.shape(),
            f.shape()
        )));
    }
    let eps = T::of(eps);
    let inv: Vec<T> = stats
        .data()
        .iter()
        .map(|&m| {
            let d = (m + eps).sqrt();
            if d > T::zero() {
                T::one() / d
            } else {
                T::zero()
            }
        })
        .collect();
    let mut out = f.clone();
    for p in 0..4 {
        for (x, s) in out.plane_mut(p).iter_mut().zip(&inv) {
            *x = *x * *s;
        }
    }
    Ok(out)
}

/// Max-pool selecting, per window, the element of largest quaternion norm.
/// Ties go to the lowest linear index.
pub fn qmaxpool_forward<T: Scalar>(f: &QTensor<T>, spec: &LayerSpec) -> Result<(QTensor<T>, PoolMask)> {
    let (window, stride) = match spec {
        LayerSpec::MaxPool { window, stride } => (*window, *stride),
        other => return Err(Error::Config(format!("{} is not a max-pool", other.kind().name()))),
    };
    let g = pool_geom(window, stride, f.shape())?;
    let norm_sq: Vec<T> = (0..f.len())
        .map(|v| {
            let n = element_norm(f, v);
            n * n
        })
        .collect();
    let selected = g.argmax(&norm_sq);
    let out = map_each_plane(f, vec![g.c, g.out_h(), g.out_w()], |x| {
        selected.iter().map(|&i| x[i]).collect()
    })?;
    Ok((out, PoolMask { shape: f.shape().to_vec(), selected }))
}

pub fn qavgpool_forward<T: Scalar>(f: &QTensor<T>, spec: &LayerSpec) -> Result<QTensor<T>> {
    let (window, stride) = match spec {
        LayerSpec::AvgPool { window, stride } => (*window, *stride),
        other => return Err(Error::Config(format!("{} is not an avg-pool", other.kind().name()))),
    };
    let g = pool_geom(window, stride, f.shape())?;
    map_each_plane(f, vec![g.c, g.out_h(), g.out_w()], |x| g.average(x))
}

/// Keep-mask for dropout over `n` elements; survivors are scaled by
/// `1/(1 − rate)`.
pub fn dropout_mask(n: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

/// Drops whole quaternion elements (all four planes) with probability
/// `rate` during training; identity at inference.
pub fn qdropout_forward<T: Scalar>(f: &QTensor<T>, rate: f64, rng: &mut ChaCha8Rng, training: bool) -> QTensor<T> {
    if !training || rate == 0.0 {
        return f.clone();
    }
    let mask = dropout_mask(f.len(), rate, rng);
    let mut out = f.clone();
    for p in 0..4 {
        for (x, m) in out.plane_mut(p).iter_mut().zip(&mask) {
            *x = *x * T::of(*m);
        }
    }
    out
}

/// `f + Φ(f)` for a single feature.
pub fn residual_forward<T: Scalar>(f: &QTensor<T>, inner: &[LayerSpec], ctx: &mut ForwardCtx) -> Result<QTensor<T>> {
    let branch = forward_quaternion(inner, vec![f.clone()], ctx)?.pop().expect("batch of one");
    f.add(&branch)
}

/// Runs an equivariant stack over a batch of quaternion features.
///
/// Batch-norm uses batch statistics in training or when no running
/// statistics are stored, and the stored statistics otherwise.
pub fn forward_quaternion<T: Scalar>(
    layers: &[LayerSpec],
    mut batch: Vec<QTensor<T>>,
    ctx: &mut ForwardCtx,
) -> Result<Vec<QTensor<T>>> {
    for layer in layers {
        batch = match layer {
            LayerSpec::Conv { .. } | LayerSpec::FullyConnected { .. } => {
                batch.iter().map(|f| qconv_forward(f, layer)).collect::<Result<_>>()?
            }
            LayerSpec::QRelu { c } => batch.iter().map(|f| qrelu_forward(f, *c)).collect(),
            LayerSpec::QBatchNorm { eps, running } => match running {
                Some(stats) if !ctx.training => {
                    let stats = stats.cast::<T>();
                    batch.iter().map(|f| qbatchnorm_with_stats(f, &stats, *eps)).collect::<Result<_>>()?
                }
                _ => qbatchnorm_forward(&batch, *eps)?,
            },
            LayerSpec::MaxPool { .. } => batch
                .iter()
                .map(|f| qmaxpool_forward(f, layer).map(|(y, _)| y))
                .collect::<Result<_>>()?,
            LayerSpec::AvgPool { .. } => {
                batch.iter().map(|f| qavgpool_forward(f, layer)).collect::<Result<_>>()?
            }
            LayerSpec::Dropout { rate } => batch
                .iter()
                .map(|f| qdropout_forward(f, *rate, &mut ctx.rng, ctx.training))
                .collect(),
            LayerSpec::Residual { inner } => {
                let branch = forward_quaternion(inner, batch.clone(), ctx)?;
                batch.iter().zip(&branch).map(|(f, b)| f.add(b)).collect::<Result<_>>()?
            }
            other => {
                return Err(Error::Config(format!(
                    "{} is not rotation-equivariant and cannot process quaternion features",
                    other.kind().name()
                )))
            }
        };
    }
    Ok(batch)
}

/// Runs a stack over a batch of real tensors (one plane per sample).
pub fn forward_real<T: Scalar>(
    layers: &[LayerSpec],
    mut batch: Vec<RealTensor<T>>,
    ctx: &mut ForwardCtx,
) -> Result<Vec<RealTensor<T>>> {
    for layer in layers {
        batch = match layer {
            LayerSpec::Conv { weight, stride, pad } => batch
                .iter()
                .map(|x| {
                    let geom = conv_geom(weight, *stride, *pad, x.shape())?;
                    let w: Vec<T> = weight.data().iter().map(|&v| T::of(v)).collect();
                    let mut out = vec![T::zero(); geom.out_len()];
                    kernels::conv2d_forward(&geom, x.data(), &w, &mut out);
                    RealTensor::new(vec![geom.out_c, geom.out_h(), geom.out_w()], out)
                })
                .collect::<Result<_>>()?,
            LayerSpec::FullyConnected { weight } => batch
                .iter()
                .map(|x| {
                    let shape = layer.output_shape(x.shape())?;
                    let w: Vec<T> = weight.data().iter().map(|&v| T::of(v)).collect();
                    let mut out = vec![T::zero(); shape[0]];
                    kernels::matvec(&w, x.data(), &mut out);
                    RealTensor::new(shape, out)
                })
                .collect::<Result<_>>()?,
            LayerSpec::QRelu { c } => {
                let c = T::of(*c);
                batch.iter().map(|x| x.map(|v| v * (v.abs() / v.abs().max(c)))).collect()
            }
            LayerSpec::QBatchNorm { eps, running } => {
                let first = batch.first().ok_or(Error::Empty("batch-norm batch"))?;
                let stats = match running {
                    Some(stats) if !ctx.training => stats.cast::<T>(),
                    _ => {
                        let mut acc = vec![T::zero(); first.len()];
                        for x in &batch {
                            if x.shape() != first.shape() {
                                return Err(Error::ShapeMismatch("batch members differ in shape".into()));
                            }
                            for (a, &v) in acc.iter_mut().zip(x.data()) {
                                *a = *a + v * v;
                            }
                        }
                        let inv = T::of(1.0 / batch.len() as f64);
                        RealTensor::new(first.shape().to_vec(), acc.into_iter().map(|a| a * inv).collect())?
                    }
                };
                let eps = T::of(*eps);
                batch
                    .iter()
                    .map(|x| {
                        let data = x.data().iter().zip(stats.data()).map(|(&v, &m)| v / (m + eps).sqrt()).collect();
                        RealTensor::new(x.shape().to_vec(), data)
                    })
                    .collect::<Result<_>>()?
            }
            LayerSpec::MaxPool { window, stride } => batch
                .iter()
                .map(|x| {
                    let g = pool_geom(*window, *stride, x.shape())?;
                    let score: Vec<T> = x.data().iter().map(|v| v.abs()).collect();
                    let sel = g.argmax(&score);
                    RealTensor::new(vec![g.c, g.out_h(), g.out_w()], sel.iter().map(|&i| x.data()[i]).collect())
                })
                .collect::<Result<_>>()?,
            LayerSpec::AvgPool { window, stride } => batch
                .iter()
                .map(|x| {
                    let g = pool_geom(*window, *stride, x.shape())?;
                    RealTensor::new(vec![g.c, g.out_h(), g.out_w()], g.average(x.data()))
                })
                .collect::<Result<_>>()?,
            LayerSpec::Dropout { rate } => {
                if !ctx.training || *rate == 0.0 {
                    batch
                } else {
                    batch
                        .iter()
                        .map(|x| {
                            let mask = dropout_mask(x.len(), *rate, &mut ctx.rng);
                            let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * T::of(m)).collect();
                            RealTensor::new(x.shape().to_vec(), data)
                        })
                        .collect::<Result<_>>()?
                }
            }
            LayerSpec::Residual { inner } => {
                let branch = forward_real(inner, batch.clone(), ctx)?;
                batch
                    .iter()
                    .zip(&branch)
                    .map(|(x, b)| {
                        if x.shape() != b.shape() {
                            return Err(Error::ShapeMismatch("residual branch changes shape".into()));
                        }
                        RealTensor::new(x.shape().to_vec(), x.data().iter().zip(b.data()).map(|(&p, &q)| p + q).collect())
                    })
                    .collect::<Result<_>>()?
            }
            LayerSpec::Relu => batch.iter().map(|x| x.map(|v| v.max(T::zero()))).collect(),
            LayerSpec::Sigmoid => batch.iter().map(|x| x.map(|v| T::one() / (T::one() + (-v).exp()))).collect(),
            LayerSpec::Flatten => batch
                .into_iter()
                .map(|x| {
                    let n = x.len();
                    x.reshape(vec![n])
                })
                .collect::<Result<_>>()?,
            LayerSpec::Upsample { factor } => batch
                .iter()
                .map(|x| {
                    let shape = layer.output_shape(x.shape())?;
                    let [c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2]];
                    RealTensor::new(shape, kernels::upsample_nearest(x.data(), c, h, w, *factor))
                })
                .collect::<Result<_>>()?,
            LayerSpec::Softmax => batch.iter().map(softmax).collect(),
        };
    }
    Ok(batch)
}

pub fn softmax<T: Scalar>(x: &RealTensor<T>) -> RealTensor<T> {
    let m = x.data().iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let e: Vec<T> = x.data().iter().map(|&v| (v - m).exp()).collect();
    let s = e.iter().fold(T::zero(), |a, &b| a + b);
    RealTensor::new(x.shape().to_vec(), e.into_iter().map(|v| v / s).collect()).expect("same shape")
}
