//! A small reverse-mode autograd tape over batched `f64` tensors.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is
//! a reverse topological order. Plane-aware operations expect tensors shaped
//! `[N, P, ...]` with `P = 4` for quaternion features and `P = 1` for real
//! ones; the norm of an element is taken across the `P` axis.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, PoolGeom};
use crate::qtensor::volume;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, geom: ConvGeom, batch: usize },
    Linear { x: Var, w: Var, rows: usize, n: usize, out: usize },
    Reshape { x: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    QRelu { x: Var, planes: usize, c: f64, norms: Vec<f64> },
    BatchNorm { x: Var, planes: usize, inv_d: Vec<f64> },
    ScaleElements { x: Var, scale: Vec<f64> },
    MaxPool { x: Var, planes: usize, geom: PoolGeom, selected: Vec<usize> },
    AvgPool { x: Var, geom: PoolGeom, batch: usize },
    Upsample { x: Var, c: usize, h: usize, w: usize, factor: usize, batch: usize },
    MulConst { x: Var, c: Vec<f64> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Scale { x: Var, s: f64 },
    Rotate { x: Var, mats: Vec<[[f64; 4]; 4]> },
    Lift { a: Var, b: Var, c: Var },
    SelectPlane { x: Var, plane: usize, planes: usize },
    Gather { x: Var, idx: Vec<usize> },
    Sum { x: Var },
    Mean { x: Var },
    SoftmaxCrossEntropy { logits: Var, probs: Vec<f64>, labels: Vec<usize> },
    BceWithLogits { x: Var, targets: Vec<f64> },
    MeanSquaredError { x: Var, target: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation and replays it backwards.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    branches: Vec<u32>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Branch decisions taken by piecewise operations (ReLU sides, QReLU
    /// branches, max-pool selections). Two forward passes with equal
    /// signatures evaluate the same smooth piece.
    pub fn branch_signature(&self) -> &[u32] {
        &self.branches
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Gradient accumulated for `v` by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(volume(&shape), value.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if volume(&shape) != value.len() {
            return Err(Error::ShapeMismatch(format!(
                "leaf shape {shape:?} with {} values",
                value.len()
            )));
        }
        self.nodes.push(Node { shape, value, op: Op::Leaf, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A trainable leaf.
    pub fn param(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        self.leaf(shape, value, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        self.leaf(shape, value, false)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Convolution over the trailing `[C, H, W]` axes; leading axes are batch.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.node(x).shape.clone();
        let ws = self.node(w).shape.clone();
        if xs.len() < 3 || ws.len() != 4 || ws[1] != xs[xs.len() - 3] {
            return Err(Error::ShapeMismatch(format!("conv2d of {xs:?} with weight {ws:?}")));
        }
        let r = xs.len();
        let geom = ConvGeom {
            in_c: xs[r - 3],
            in_h: xs[r - 2],
            in_w: xs[r - 1],
            out_c: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
        };
        geom.validate()?;
        let batch = volume(&xs[..r - 3]);
        let (il, ol) = (geom.in_len(), geom.out_len());
        let mut out = vec![0.0; batch * ol];
        {
            let (xv, wv) = (&self.node(x).value, &self.node(w).value);
            for b in 0..batch {
                kernels::conv2d_forward(&geom, &xv[b * il..(b + 1) * il], wv, &mut out[b * ol..(b + 1) * ol]);
            }
        }
        let mut shape = xs[..r - 3].to_vec();
        shape.extend([geom.out_c, geom.out_h(), geom.out_w()]);
        Ok(self.push(shape, out, Op::Conv2d { x, w, geom, batch }, &[x, w]))
    }

    /// `y[..., o] = Σ_k w[o, k] x[..., k]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.node(x).shape.clone();
        let ws = self.node(w).shape.clone();
        let n = *xs.last().unwrap_or(&0);
        if ws.len() != 2 || ws[1] != n {
            return Err(Error::ShapeMismatch(format!("linear of {xs:?} with weight {ws:?}")));
        }
        let out_dim = ws[0];
        let rows = volume(&xs) / n.max(1);
        let mut out = vec![0.0; rows * out_dim];
        {
            let (xv, wv) = (&self.node(x).value, &self.node(w).value);
            for r in 0..rows {
                kernels::matvec(wv, &xv[r * n..(r + 1) * n], &mut out[r * out_dim..(r + 1) * out_dim]);
            }
        }
        let mut shape = xs[..xs.len() - 1].to_vec();
        shape.push(out_dim);
        Ok(self.push(shape, out, Op::Linear { x, w, rows, n, out: out_dim }, &[x, w]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if volume(&shape) != self.node(x).value.len() {
            return Err(Error::ShapeMismatch(format!(
                "reshape {:?} to {shape:?}",
                self.node(x).shape
            )));
        }
        let value = self.node(x).value.clone();
        Ok(self.push(shape, value, Op::Reshape { x }, &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value: Vec<f64> = self.node(x).value.iter().map(|&v| v.max(0.0)).collect();
        let signs: Vec<u32> = self.node(x).value.iter().map(|&v| (v > 0.0) as u32).collect();
        self.branches.extend(signs);
        let shape = self.node(x).shape.clone();
        self.push(shape, value, Op::Relu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value: Vec<f64> = self.node(x).value.iter().map(|&v| sigmoid(v)).collect();
        let shape = self.node(x).shape.clone();
        self.push(shape, value, Op::Sigmoid { x }, &[x])
    }

    fn plane_layout(&self, x: Var, planes: usize) -> Result<(usize, usize)> {
        let s = &self.node(x).shape;
        if s.len() < 2 || s[1] != planes {
            return Err(Error::ShapeMismatch(format!("expected [N, {planes}, ...], got {s:?}")));
        }
        Ok((s[0], volume(&s[2..])))
    }

    /// `f_v ↦ ‖f_v‖ / max(‖f_v‖, C) · f_v` with norms across the plane axis.
    pub fn qrelu(&mut self, x: Var, planes: usize, c: f64) -> Result<Var> {
        let (n, m) = self.plane_layout(x, planes)?;
        let xv = &self.nodes[x.0].value;
        let mut out = xv.clone();
        let mut norms = vec![0.0; n * m];
        let mut branches = Vec::with_capacity(n * m);
        for s in 0..n {
            for v in 0..m {
                let nv = plane_norm(xv, s, v, planes, m);
                norms[s * m + v] = nv;
                branches.push((nv >= c) as u32);
                let scale = nv / nv.max(c);
                for p in 0..planes {
                    out[(s * planes + p) * m + v] *= scale;
                }
            }
        }
        self.branches.extend(branches);
        let shape = self.node(x).shape.clone();
        Ok(self.push(shape, out, Op::QRelu { x, planes, c, norms }, &[x]))
    }

    /// Batch normalization by `sqrt(E_batch ‖f_v‖² + ε)` per element. Returns
    /// the output and the batch mean-square statistics.
    pub fn batch_norm(&mut self, x: Var, planes: usize, eps: f64) -> Result<(Var, Vec<f64>)> {
        let (n, m) = self.plane_layout(x, planes)?;
        if n == 0 {
            return Err(Error::Empty("batch-norm batch"));
        }
        let xv = &self.nodes[x.0].value;
        let mut ms = vec![0.0; m];
        for s in 0..n {
            for (v, acc) in ms.iter_mut().enumerate() {
                let nv = plane_norm(xv, s, v, planes, m);
                *acc += nv * nv;
            }
        }
        ms.iter_mut().for_each(|a| *a /= n as f64);
        let inv_d: Vec<f64> = ms.iter().map(|&a| 1.0 / (a + eps).sqrt()).collect();
        let mut out = xv.clone();
        for s in 0..n {
            for p in 0..planes {
                let row = &mut out[(s * planes + p) * m..(s * planes + p + 1) * m];
                row.iter_mut().zip(&inv_d).for_each(|(o, d)| *o *= d);
            }
        }
        let shape = self.node(x).shape.clone();
        Ok((self.push(shape, out, Op::BatchNorm { x, planes, inv_d }, &[x]), ms))
    }

    /// Multiplies element `v` of every sample and plane by `scale[v]`.
    pub fn scale_elements(&mut self, x: Var, planes: usize, scale: Vec<f64>) -> Result<Var> {
        let (n, m) = self.plane_layout(x, planes)?;
        if scale.len() != m {
            return Err(Error::ShapeMismatch(format!("{} scales for {m} elements", scale.len())));
        }
        let mut out = self.node(x).value.clone();
        for row in 0..n * planes {
            out[row * m..(row + 1) * m].iter_mut().zip(&scale).for_each(|(o, s)| *o *= s);
        }
        let shape = self.node(x).shape.clone();
        Ok(self.push(shape, out, Op::ScaleElements { x, scale }, &[x]))
    }

    /// Max-pool over `[N, P, C, H, W]` picking the element of largest norm
    /// per window (lowest index on ties) and copying all of its planes.
    pub fn max_pool(&mut self, x: Var, planes: usize, window: usize, stride: usize) -> Result<Var> {
        let s = self.node(x).shape.clone();
        if s.len() != 5 || s[1] != planes {
            return Err(Error::ShapeMismatch(format!("max_pool expects [N, {planes}, C, H, W], got {s:?}")));
        }
        let geom = PoolGeom { c: s[2], h: s[3], w: s[4], window, stride };
        geom.validate()?;
        let (n, m, ol) = (s[0], s[2] * s[3] * s[4], geom.out_len());
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; n * planes * ol];
        let mut selected = Vec::with_capacity(n * ol);
        let mut norm_sq = vec![0.0; m];
        for smp in 0..n {
            for (v, ns) in norm_sq.iter_mut().enumerate() {
                let nv = plane_norm(xv, smp, v, planes, m);
                *ns = nv * nv;
            }
            let sel = geom.argmax(&norm_sq);
            for (o, &i) in sel.iter().enumerate() {
                for p in 0..planes {
                    out[(smp * planes + p) * ol + o] = xv[(smp * planes + p) * m + i];
                }
            }
            selected.extend(sel);
        }
        self.branches.extend(selected.iter().map(|&i| i as u32));
        let shape = vec![n, planes, geom.c, geom.out_h(), geom.out_w()];
        Ok(self.push(shape, out, Op::MaxPool { x, planes, geom, selected }, &[x]))
    }

    /// Average pool over trailing `[C, H, W]`.
    pub fn avg_pool(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let s = self.node(x).shape.clone();
        if s.len() < 3 {
            return Err(Error::ShapeMismatch(format!("avg_pool of {s:?}")));
        }
        let r = s.len();
        let geom = PoolGeom { c: s[r - 3], h: s[r - 2], w: s[r - 1], window, stride };
        geom.validate()?;
        let batch = volume(&s[..r - 3]);
        let (il, ol) = (geom.c * geom.h * geom.w, geom.out_len());
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(batch * ol);
        for b in 0..batch {
            out.extend(geom.average(&xv[b * il..(b + 1) * il]));
        }
        let mut shape = s[..r - 3].to_vec();
        shape.extend([geom.c, geom.out_h(), geom.out_w()]);
        Ok(self.push(shape, out, Op::AvgPool { x, geom, batch }, &[x]))
    }

    /// Nearest-neighbour upsampling of trailing `[C, H, W]`.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.node(x).shape.clone();
        if s.len() < 3 || factor == 0 {
            return Err(Error::ShapeMismatch(format!("upsample of {s:?} by {factor}")));
        }
        let r = s.len();
        let (c, h, w) = (s[r - 3], s[r - 2], s[r - 1]);
        let batch = volume(&s[..r - 3]);
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(batch * c * h * w * factor * factor);
        for b in 0..batch {
            out.extend(kernels::upsample_nearest(&xv[b * c * h * w..(b + 1) * c * h * w], c, h, w, factor));
        }
        let mut shape = s[..r - 3].to_vec();
        shape.extend([c, h * factor, w * factor]);
        Ok(self.push(shape, out, Op::Upsample { x, c, h, w, factor, batch }, &[x]))
    }

    /// Elementwise product with a constant tensor of the same size.
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.node(x).value.len() {
            return Err(Error::ShapeMismatch("mul_const size mismatch".into()));
        }
        let out = self.node(x).value.iter().zip(&c).map(|(a, b)| a * b).collect();
        let shape = self.node(x).shape.clone();
        Ok(self.push(shape, out, Op::MulConst { x, c }, &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b)?;
        let out = self.node(a).value.iter().zip(&self.node(b).value).map(|(p, q)| p + q).collect();
        let shape = self.node(a).shape.clone();
        Ok(self.push(shape, out, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b)?;
        let out = self.node(a).value.iter().zip(&self.node(b).value).map(|(p, q)| p - q).collect();
        let shape = self.node(a).shape.clone();
        Ok(self.push(shape, out, Op::Sub { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.node(x).value.iter().map(|v| v * s).collect();
        let shape = self.node(x).shape.clone();
        self.push(shape, out, Op::Scale { x, s }, &[x])
    }

    fn check_same(&self, a: Var, b: Var) -> Result<()> {
        if self.node(a).shape != self.node(b).shape {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.node(a).shape,
                self.node(b).shape
            )));
        }
        Ok(())
    }

    /// Applies a per-sample 4×4 matrix across the plane axis of `[N, 4, ...]`.
    pub fn rotate(&mut self, x: Var, mats: Vec<[[f64; 4]; 4]>) -> Result<Var> {
        let (n, m) = self.plane_layout(x, 4)?;
        if mats.len() != n {
            return Err(Error::ShapeMismatch(format!("{} rotations for batch {n}", mats.len())));
        }
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; xv.len()];
        for (s, mat) in mats.iter().enumerate() {
            apply_plane_matrix(mat, &xv[s * 4 * m..(s + 1) * 4 * m], &mut out[s * 4 * m..(s + 1) * 4 * m], m);
        }
        let shape = self.node(x).shape.clone();
        Ok(self.push(shape, out, Op::Rotate { x, mats }, &[x]))
    }

    /// Stacks `[N, ...]` tensors into the pure `[N, 4, ...]` tensor
    /// `0 + a i + b j + c k`.
    pub fn lift(&mut self, a: Var, b: Var, c: Var) -> Result<Var> {
        self.check_same(a, b)?;
        self.check_same(a, c)?;
        let s = self.node(a).shape.clone();
        let n = s[0];
        let m = volume(&s[1..]);
        let mut out = vec![0.0; n * 4 * m];
        for (p, src) in [(1, a), (2, b), (3, c)] {
            let sv = &self.nodes[src.0].value;
            for smp in 0..n {
                out[(smp * 4 + p) * m..(smp * 4 + p + 1) * m].copy_from_slice(&sv[smp * m..(smp + 1) * m]);
            }
        }
        let mut shape = vec![n, 4];
        shape.extend(&s[1..]);
        Ok(self.push(shape, out, Op::Lift { a, b, c }, &[a, b, c]))
    }

    /// Plane `plane` of `[N, P, ...]` as `[N, ...]`.
    pub fn select_plane(&mut self, x: Var, planes: usize, plane: usize) -> Result<Var> {
        let (n, m) = self.plane_layout(x, planes)?;
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(n * m);
        for s in 0..n {
            out.extend_from_slice(&xv[(s * planes + plane) * m..(s * planes + plane + 1) * m]);
        }
        let mut shape = vec![n];
        shape.extend(&self.node(x).shape[2..]);
        Ok(self.push(shape, out, Op::SelectPlane { x, plane, planes }, &[x]))
    }

    /// Rows of `x` along axis 0 in the order `idx`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let s = self.node(x).shape.clone();
        let m = volume(&s[1..]);
        if idx.iter().any(|&i| i >= s[0]) {
            return Err(Error::ShapeMismatch("gather index out of range".into()));
        }
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(idx.len() * m);
        for &i in &idx {
            out.extend_from_slice(&xv[i * m..(i + 1) * m]);
        }
        let mut shape = vec![idx.len()];
        shape.extend(&s[1..]);
        Ok(self.push(shape, out, Op::Gather { x, idx }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.node(x).value.iter().sum();
        self.push(vec![1], vec![s], Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.node(x).value;
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        self.push(vec![1], vec![s], Op::Mean { x }, &[x])
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.node(logits).shape.clone();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
            return Err(Error::ShapeMismatch(format!("cross-entropy of {s:?} with {} labels", labels.len())));
        }
        let (n, k) = (s[0], s[1]);
        let lv = &self.nodes[logits.0].value;
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &lv[i * k..(i + 1) * k];
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let z: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - mx).exp() / z;
            }
            loss += -(row[labels[i]] - mx - z.ln());
        }
        loss /= n as f64;
        Ok(self.push(vec![1], vec![loss], Op::SoftmaxCrossEntropy { logits, probs, labels: labels.to_vec() }, &[logits]))
    }

    /// Mean binary cross-entropy of logits against targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, x: Var, targets: Vec<f64>) -> Result<Var> {
        if targets.len() != self.node(x).value.len() {
            return Err(Error::ShapeMismatch("bce target size mismatch".into()));
        }
        let xv = &self.node(x).value;
        let loss = xv
            .iter()
            .zip(&targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / xv.len() as f64;
        Ok(self.push(vec![1], vec![loss], Op::BceWithLogits { x, targets }, &[x]))
    }

    pub fn mse(&mut self, x: Var, target: Vec<f64>) -> Result<Var> {
        if target.len() != self.node(x).value.len() {
            return Err(Error::ShapeMismatch("mse target size mismatch".into()));
        }
        let xv = &self.node(x).value;
        let loss = xv.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / xv.len() as f64;
        Ok(self.push(vec![1], vec![loss], Op::MeanSquaredError { x, target }, &[x]))
    }

    /// Back-propagates from the scalar `root`, replacing any previous
    /// gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes.is_empty() || root.0 >= self.nodes.len() {
            return Err(Error::Autograd("backward called before any forward computation".into()));
        }
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Autograd(format!(
                "loss root must be a scalar, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, geom, batch } => {
                let (il, ol) = (geom.in_len(), geom.out_len());
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                for b in 0..*batch {
                    kernels::conv2d_backward(
                        geom,
                        &xv[b * il..(b + 1) * il],
                        wv,
                        &g[b * ol..(b + 1) * ol],
                        &mut dx[b * il..(b + 1) * il],
                        &mut dw,
                    );
                }
                if wants(*x) {
                    accumulate(grads, *x, &dx);
                }
                if wants(*w) {
                    accumulate(grads, *w, &dw);
                }
            }
            Op::Linear { x, w, rows, n, out } => {
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                if wants(*x) {
                    let mut dx = vec![0.0; xv.len()];
                    for r in 0..*rows {
                        for o in 0..*out {
                            let go = g[r * out + o];
                            if go != 0.0 {
                                let wr = &wv[o * n..(o + 1) * n];
                                dx[r * n..(r + 1) * n].iter_mut().zip(wr).for_each(|(d, w)| *d += go * w);
                            }
                        }
                    }
                    accumulate(grads, *x, &dx);
                }
                if wants(*w) {
                    let mut dw = vec![0.0; wv.len()];
                    for r in 0..*rows {
                        let xr = &xv[r * n..(r + 1) * n];
                        for o in 0..*out {
                            let go = g[r * out + o];
                            if go != 0.0 {
                                dw[o * n..(o + 1) * n].iter_mut().zip(xr).for_each(|(d, x)| *d += go * x);
                            }
                        }
                    }
                    accumulate(grads, *w, &dw);
                }
            }
            Op::Reshape { x } => accumulate(grads, *x, g),
            Op::Relu { x } => {
                let dx: Vec<f64> = nodes[x.0].value.iter().zip(g).map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 }).collect();
                accumulate(grads, *x, &dx);
            }
            Op::Sigmoid { x } => {
                let dx: Vec<f64> = node.value.iter().zip(g).map(|(&y, &gv)| gv * y * (1.0 - y)).collect();
                accumulate(grads, *x, &dx);
            }
            Op::QRelu { x, planes, c, norms } => {
                let xv = &nodes[x.0].value;
                let p = *planes;
                let n = node.shape[0];
                let m = norms.len() / n.max(1);
                let mut dx = g.to_vec();
                for s in 0..n {
                    for v in 0..m {
                        let nv = norms[s * m + v];
                        if nv >= *c {
                            continue;
                        }
                        // y = ‖f‖ f / C  ⇒  dL/df = (‖f‖ g + f (f·g)/‖f‖) / C.
                        let at = |pl: usize| (s * p + pl) * m + v;
                        if nv == 0.0 {
                            for pl in 0..p {
                                dx[at(pl)] = 0.0;
                            }
                            continue;
                        }
                        let fg: f64 = (0..p).map(|pl| xv[at(pl)] * g[at(pl)]).sum();
                        for pl in 0..p {
                            dx[at(pl)] = (nv * g[at(pl)] + xv[at(pl)] * fg / nv) / c;
                        }
                    }
                }
                accumulate(grads, *x, &dx);
            }
            Op::BatchNorm { x, planes, inv_d } => {
                // y = f / d, d² = E‖f‖² + ε  ⇒
                // dL/df^s = g^s / d − f^s Σ_t (g^t·f^t) / (N d³).
                let xv = &nodes[x.0].value;
                let p = *planes;
                let n = node.shape[0];
                let m = inv_d.len();
                let mut corr = vec![0.0; m];
                for s in 0..n {
                    for pl in 0..p {
                        let off = (s * p + pl) * m;
                        for v in 0..m {
                            corr[v] += g[off + v] * xv[off + v];
                        }
                    }
                }
                let mut dx = vec![0.0; xv.len()];
                for s in 0..n {
                    for pl in 0..p {
                        let off = (s * p + pl) * m;
                        for v in 0..m {
                            let id = inv_d[v];
                            dx[off + v] = g[off + v] * id - xv[off + v] * corr[v] * id * id * id / n as f64;
                        }
                    }
                }
                accumulate(grads, *x, &dx);
            }
            Op::ScaleElements { x, scale } => {
                let m = scale.len();
                let dx: Vec<f64> = g.iter().enumerate().map(|(i, gv)| gv * scale[i % m]).collect();
                accumulate(grads, *x, &dx);
            }
            Op::MaxPool { x, planes, geom, selected } => {
                let p = *planes;
                let m = geom.c * geom.h * geom.w;
                let ol = geom.out_len();
                let n = node.shape[0];
                let mut dx = vec![0.0; nodes[x.0].value.len()];
                for s in 0..n {
                    for o in 0..ol {
                        let i = selected[s * ol + o];
                        for pl in 0..p {
                            dx[(s * p + pl) * m + i] += g[(s * p + pl) * ol + o];
                        }
                    }
                }
                accumulate(grads, *x, &dx);
            }
            Op::AvgPool { x, geom, batch } => {
                let il = geom.c * geom.h * geom.w;
                let ol = geom.out_len();
                let inv = 1.0 / (geom.window * geom.window) as f64;
                let mut dx = vec![0.0; nodes[x.0].value.len()];
                for b in 0..*batch {
                    let gb = &g[b * ol..(b + 1) * ol];
                    let dxb = &mut dx[b * il..(b + 1) * il];
                    geom.for_each_window(|o, idx| {
                        for &i in idx {
                            dxb[i] += gb[o] * inv;
                        }
                    });
                }
                accumulate(grads, *x, &dx);
            }
            Op::Upsample { x, c, h, w, factor, batch } => {
                let (oh, ow) = (h * factor, w * factor);
                let mut dx = vec![0.0; nodes[x.0].value.len()];
                for b in 0..*batch {
                    for ci in 0..*c {
                        for y in 0..oh {
                            for xo in 0..ow {
                                dx[((b * c + ci) * h + y / factor) * w + xo / factor] +=
                                    g[((b * c + ci) * oh + y) * ow + xo];
                            }
                        }
                    }
                }
                accumulate(grads, *x, &dx);
            }
            Op::MulConst { x, c } => {
                let dx: Vec<f64> = g.iter().zip(c).map(|(a, b)| a * b).collect();
                accumulate(grads, *x, &dx);
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    accumulate(grads, *a, g);
                }
                if wants(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Sub { a, b } => {
                if wants(*a) {
                    accumulate(grads, *a, g);
                }
                if wants(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(grads, *b, &neg);
                }
            }
            Op::Scale { x, s } => {
                let dx: Vec<f64> = g.iter().map(|v| v * s).collect();
                accumulate(grads, *x, &dx);
            }
            Op::Rotate { x, mats } => {
                let m = volume(&node.shape[2..]);
                let mut dx = vec![0.0; g.len()];
                for (s, mat) in mats.iter().enumerate() {
                    let t = transpose(mat);
                    apply_plane_matrix(&t, &g[s * 4 * m..(s + 1) * 4 * m], &mut dx[s * 4 * m..(s + 1) * 4 * m], m);
                }
                accumulate(grads, *x, &dx);
            }
            Op::Lift { a, b, c } => {
                let n = node.shape[0];
                let m = volume(&node.shape[2..]);
                for (p, src) in [(1, *a), (2, *b), (3, *c)] {
                    if !wants(src) {
                        continue;
                    }
                    let mut d = Vec::with_capacity(n * m);
                    for s in 0..n {
                        d.extend_from_slice(&g[(s * 4 + p) * m..(s * 4 + p + 1) * m]);
                    }
                    accumulate(grads, src, &d);
                }
            }
            Op::SelectPlane { x, plane, planes } => {
                let n = node.shape[0];
                let m = volume(&node.shape[1..]);
                let mut dx = vec![0.0; nodes[x.0].value.len()];
                for s in 0..n {
                    dx[(s * planes + plane) * m..(s * planes + plane + 1) * m].copy_from_slice(&g[s * m..(s + 1) * m]);
                }
                accumulate(grads, *x, &dx);
            }
            Op::Gather { x, idx } => {
                let m = volume(&node.shape[1..]);
                let mut dx = vec![0.0; nodes[x.0].value.len()];
                for (r, &i) in idx.iter().enumerate() {
                    dx[i * m..(i + 1) * m].iter_mut().zip(&g[r * m..(r + 1) * m]).for_each(|(d, gv)| *d += gv);
                }
                accumulate(grads, *x, &dx);
            }
            Op::Sum { x } => {
                let dx = vec![g[0]; nodes[x.0].value.len()];
                accumulate(grads, *x, &dx);
            }
            Op::Mean { x } => {
                let n = nodes[x.0].value.len();
                let dx = vec![g[0] / n as f64; n];
                accumulate(grads, *x, &dx);
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                let n = labels.len();
                let k = probs.len() / n;
                let mut dx = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    dx[i * k + l] -= 1.0;
                }
                dx.iter_mut().for_each(|d| *d *= g[0] / n as f64);
                accumulate(grads, *logits, &dx);
            }
            Op::BceWithLogits { x, targets } => {
                let n = targets.len() as f64;
                let dx: Vec<f64> = nodes[x.0].value.iter().zip(targets).map(|(&z, &t)| g[0] * (sigmoid(z) - t) / n).collect();
                accumulate(grads, *x, &dx);
            }
            Op::MeanSquaredError { x, target } => {
                let n = target.len() as f64;
                let dx: Vec<f64> = nodes[x.0].value.iter().zip(target).map(|(&a, &b)| g[0] * 2.0 * (a - b) / n).collect();
                accumulate(grads, *x, &dx);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn plane_norm(x: &[f64], sample: usize, v: usize, planes: usize, m: usize) -> f64 {
    let base = sample * planes * m + v;
    if planes == 4 {
        let sq = |p: usize| x[base + p * m] * x[base + p * m];
        ((sq(0) + sq(1)) + (sq(2) + sq(3))).sqrt()
    } else {
        (0..planes).map(|p| x[base + p * m].powi(2)).sum::<f64>().sqrt()
    }
}

fn apply_plane_matrix(mat: &[[f64; 4]; 4], x: &[f64], out: &mut [f64], m: usize) {
    for p in 0..4 {
        let row = mat[p];
        let o = &mut out[p * m..(p + 1) * m];
        for v in 0..m {
            o[v] = row[0] * x[v] + row[1] * x[m + v] + row[2] * x[2 * m + v] + row[3] * x[3 * m + v];
        }
    }
}

fn transpose(m: &[[f64; 4]; 4]) -> [[f64; 4]; 4] {
    std::array::from_fn(|i| std::array::from_fn(|j| m[j][i]))
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randv(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Central-difference gradient of `f` at `x` with step `h`.
    fn numeric_grad(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let mut xp = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = xp[i];
                xp[i] = orig + h;
                let up = f(&xp);
                xp[i] = orig - h;
                let down = f(&xp);
                xp[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn assert_grad_close(analytic: &[f64], numeric: &[f64], tol: f64) {
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            assert!(rel <= tol, "component {i}: analytic {a} numeric {n} rel {rel}");
        }
    }

    /// Checks d(Σ r ⊙ op(x))/dx against finite differences.
    fn check_unary(shape: Vec<usize>, seed: u64, op: impl Fn(&mut Tape, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = randv(&mut rng, volume(&shape));
        let probe = {
            let mut t = Tape::new();
            let x = t.constant(shape.clone(), x0.clone()).unwrap();
            let y = op(&mut t, x);
            randv(&mut rng, t.value(y).len())
        };
        let eval = |xv: &[f64]| -> f64 {
            let mut t = Tape::new();
            let x = t.constant(shape.clone(), xv.to_vec()).unwrap();
            let y = op(&mut t, x);
            t.value(y).iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let mut t = Tape::new();
        let x = t.param(shape.clone(), x0.clone()).unwrap();
        let y = op(&mut t, x);
        let r = t.mul_const(y, probe.clone()).unwrap();
        let loss = t.sum(r);
        t.backward(loss).unwrap();
        let analytic = t.grad(x).unwrap().to_vec();
        assert_grad_close(&analytic, &numeric_grad(&x0, 1e-5, eval), 1e-6);
    }

    #[test]
    fn sum_of_params_has_unit_gradient() {
        let mut t = Tape::new();
        let w = t.param(vec![5], vec![0.3, -1.0, 2.0, 0.0, 7.0]).unwrap();
        let l = t.sum(w);
        t.backward(l).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[1.0; 5]);
    }

    #[test]
    fn half_squared_norm_has_identity_gradient() {
        let w0 = vec![0.3, -1.0, 2.0];
        let mut t = Tape::new();
        let w = t.param(vec![3], w0.clone()).unwrap();
        // mse against zero is ‖w‖²/3, so 1.5 × mse = ½‖w‖².
        let l = t.mse(w, vec![0.0; 3]).unwrap();
        let l = t.scale(l, 1.5);
        t.backward(l).unwrap();
        for (g, w) in t.grad(w).unwrap().iter().zip(&w0) {
            assert!((g - w).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_errors() {
        let mut t = Tape::new();
        assert!(matches!(t.backward(Var(0)), Err(Error::Autograd(_))));
        let x = t.param(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(t.backward(x), Err(Error::Autograd(_))));
    }

    #[test]
    fn gradients_accumulate_over_shared_inputs() {
        let mut t = Tape::new();
        let x = t.param(vec![2], vec![1.0, 2.0]).unwrap();
        let y = t.add(x, x).unwrap();
        let l = t.sum(y);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn conv_and_linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = randv(&mut rng, 3 * 2 * 3 * 3);
        check_unary(vec![2, 2, 5, 5], 2, |t, x| {
            let wv = t.constant(vec![3, 2, 3, 3], w.clone()).unwrap();
            t.conv2d(x, wv, 2, 1).unwrap()
        });
        let x = randv(&mut rng, 2 * 2 * 5 * 5);
        check_unary(vec![3, 2, 3, 3], 3, |t, wv| {
            let xv = t.constant(vec![2, 2, 5, 5], x.clone()).unwrap();
            t.conv2d(xv, wv, 1, 1).unwrap()
        });
        let w = randv(&mut rng, 4 * 6);
        check_unary(vec![3, 6], 4, |t, x| {
            let wv = t.constant(vec![4, 6], w.clone()).unwrap();
            t.linear(x, wv).unwrap()
        });
    }

    #[test]
    fn nonlinear_plane_ops_gradients() {
        check_unary(vec![3, 4, 2, 2], 5, |t, x| t.qrelu(x, 4, 1.0).unwrap());
        check_unary(vec![3, 4, 6], 6, |t, x| t.batch_norm(x, 4, 1e-5).unwrap().0);
        check_unary(vec![2, 4, 1, 4, 4], 7, |t, x| t.max_pool(x, 4, 2, 2).unwrap());
        check_unary(vec![2, 1, 4, 4], 8, |t, x| t.avg_pool(x, 2, 2).unwrap());
        check_unary(vec![2, 1, 2, 2], 9, |t, x| t.upsample(x, 2).unwrap());
        check_unary(vec![7], 10, |t, x| t.sigmoid(x));
        check_unary(vec![2, 4, 3], 11, |t, x| t.qrelu(x, 4, 0.05).unwrap());
    }

    #[test]
    fn structural_op_gradients() {
        let mats: Vec<[[f64; 4]; 4]> = (0..2)
            .map(|s| crate::quat::sample_rotation(s).rotor().unwrap().conjugation_matrix())
            .collect();
        check_unary(vec![2, 4, 3], 12, |t, x| t.rotate(x, mats.clone()).unwrap());
        check_unary(vec![2, 4, 3], 13, |t, x| t.select_plane(x, 4, 1).unwrap());
        check_unary(vec![3, 2], 14, |t, x| t.gather(x, vec![2, 0, 2]).unwrap());
        check_unary(vec![2, 3], 15, |t, x| {
            let y = t.scale(x, 0.5);
            t.lift(x, y, x).unwrap()
        });
        check_unary(vec![2, 3], 16, |t, x| t.softmax_cross_entropy(x, &[2, 0]).unwrap());
        check_unary(vec![4], 17, |t, x| t.bce_with_logits(x, vec![1.0, 0.0, 0.3, 1.0]).unwrap());
    }
}
