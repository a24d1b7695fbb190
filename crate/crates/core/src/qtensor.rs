//! Real and quaternion-valued tensors.
//!
//! A [`QTensor`] stores its four components as separate real planes
//! (`r`, `i`, `j`, `k`), each row-major with the channel axis outermost. Real
//! weights act on each plane independently, so a linear layer on a
//! quaternion tensor is four runs of the same real kernel.

use std::fmt::Debug;
use std::io::{Read, Write};
use std::path::Path;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::quat::{check_unit, Quaternion};

/// Floating-point element type of tensors (`f32` by default, `f64` for
/// gradient checks).
pub trait Scalar: Float + Default + Debug + Send + Sync + 'static {
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Number of elements described by `shape`.
pub fn volume(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RealTensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> RealTensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if volume(&shape) != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {} values, got {}",
                volume(&shape),
                data.len()
            )));
        }
        Ok(RealTensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = volume(&shape);
        RealTensor { shape, data: vec![T::zero(); n] }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let n = volume(&shape);
        RealTensor { shape, data: vec![value; n] }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Self {
        let data = (0..volume(&shape)).map(&mut f).collect();
        RealTensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        RealTensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        RealTensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> RealTensor<U> {
        RealTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &RealTensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QTensor<T = f32> {
    shape: Vec<usize>,
    planes: [Vec<T>; 4],
}

impl<T: Scalar> QTensor<T> {
    pub fn new(shape: Vec<usize>, planes: [Vec<T>; 4]) -> Result<Self> {
        let n = volume(&shape);
        if let Some(bad) = planes.iter().find(|p| p.len() != n) {
            return Err(Error::ShapeMismatch(format!(
                "plane of length {} for shape {shape:?}",
                bad.len()
            )));
        }
        Ok(QTensor { shape, planes })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = volume(&shape);
        QTensor { shape, planes: std::array::from_fn(|_| vec![T::zero(); n]) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Number of quaternion elements.
    pub fn len(&self) -> usize {
        self.planes[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self, p: usize) -> &[T] {
        &self.planes[p]
    }

    pub fn plane_mut(&mut self, p: usize) -> &mut [T] {
        &mut self.planes[p]
    }

    pub fn planes(&self) -> &[Vec<T>; 4] {
        &self.planes
    }

    pub fn into_planes(self) -> [Vec<T>; 4] {
        self.planes
    }

    /// Plane `p` as a real tensor of the same shape.
    pub fn project(&self, p: usize) -> RealTensor<T> {
        RealTensor { shape: self.shape.clone(), data: self.planes[p].clone() }
    }

    pub fn get(&self, v: usize) -> Quaternion {
        Quaternion::new(
            self.planes[0][v].as_f64(),
            self.planes[1][v].as_f64(),
            self.planes[2][v].as_f64(),
            self.planes[3][v].as_f64(),
        )
    }

    pub fn set(&mut self, v: usize, q: Quaternion) {
        for (p, c) in q.to_array().into_iter().enumerate() {
            self.planes[p][v] = T::of(c);
        }
    }

    /// True when the real plane is identically zero.
    pub fn is_pure(&self) -> bool {
        self.planes[0].iter().all(|v| *v == T::zero())
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        QTensor::new(shape, self.planes)
    }

    pub fn cast<U: Scalar>(&self) -> QTensor<U> {
        QTensor {
            shape: self.shape.clone(),
            planes: std::array::from_fn(|p| self.planes[p].iter().map(|v| U::of(v.as_f64())).collect()),
        }
    }

    pub fn add(&self, other: &QTensor<T>) -> Result<QTensor<T>> {
        self.check_same_shape(other)?;
        Ok(QTensor {
            shape: self.shape.clone(),
            planes: std::array::from_fn(|p| {
                self.planes[p].iter().zip(&other.planes[p]).map(|(&a, &b)| a + b).collect()
            }),
        })
    }

    pub fn scale(&self, s: T) -> QTensor<T> {
        self.map_planes(|v| v * s)
    }

    pub fn map_planes(&self, f: impl Fn(T) -> T) -> QTensor<T> {
        QTensor {
            shape: self.shape.clone(),
            planes: std::array::from_fn(|p| self.planes[p].iter().map(|&v| f(v)).collect()),
        }
    }

    pub(crate) fn check_same_shape(&self, other: &QTensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Squared Frobenius norm over all planes.
    pub fn frobenius_sq(&self) -> f64 {
        self.planes.iter().flatten().map(|v| v.as_f64().powi(2)).sum()
    }

    /// `‖self − other‖ / ‖other‖` over all four planes; `‖self − other‖`
    /// when `other` is zero.
    pub fn relative_error(&self, other: &QTensor<T>) -> f64 {
        let mut diff = 0.0;
        for p in 0..4 {
            for (a, b) in self.planes[p].iter().zip(&other.planes[p]) {
                diff += (a.as_f64() - b.as_f64()).powi(2);
            }
        }
        let base = other.frobenius_sq();
        if base > 0.0 {
            (diff / base).sqrt()
        } else {
            diff.sqrt()
        }
    }
}

/// Builds the pure tensor `0 + a i + b j + c k`.
pub fn lift<T: Scalar>(a: &RealTensor<T>, b: &RealTensor<T>, c: &RealTensor<T>) -> Result<QTensor<T>> {
    if a.shape != b.shape || a.shape != c.shape {
        return Err(Error::ShapeMismatch(format!(
            "lift of {:?}, {:?}, {:?}",
            a.shape, b.shape, c.shape
        )));
    }
    Ok(QTensor {
        shape: a.shape.clone(),
        planes: [vec![T::zero(); a.len()], a.data.clone(), b.data.clone(), c.data.clone()],
    })
}

/// Rotates every element by `R (·) R̄`.
pub fn rotate_all<T: Scalar>(r: Quaternion, x: &QTensor<T>) -> Result<QTensor<T>> {
    check_unit(r)?;
    Ok(rotate_planes(&r.conjugation_matrix(), x))
}

/// Applies a 4×4 conjugation matrix to the component vector of every element.
pub(crate) fn rotate_planes<T: Scalar>(m: &[[f64; 4]; 4], x: &QTensor<T>) -> QTensor<T> {
    let mt: [[T; 4]; 4] = std::array::from_fn(|p| std::array::from_fn(|q| T::of(m[p][q])));
    let n = x.len();
    let mut planes: [Vec<T>; 4] = std::array::from_fn(|_| vec![T::zero(); n]);
    // Row 0 of a conjugation matrix is e0, so the real part passes through.
    planes[0].copy_from_slice(&x.planes[0]);
    for p in 1..4 {
        let out = &mut planes[p];
        for v in 0..n {
            out[v] = mt[p][1] * x.planes[1][v] + mt[p][2] * x.planes[2][v] + mt[p][3] * x.planes[3][v]
                + mt[p][0] * x.planes[0][v];
        }
    }
    QTensor { shape: x.shape.clone(), planes }
}

/// Elementwise quaternion norm.
pub fn norm_map<T: Scalar>(x: &QTensor<T>) -> RealTensor<T> {
    let data = (0..x.len())
        .map(|v| {
            let s = x.planes[0][v] * x.planes[0][v]
                + x.planes[1][v] * x.planes[1][v]
                + x.planes[2][v] * x.planes[2][v]
                + x.planes[3][v] * x.planes[3][v];
            s.sqrt()
        })
        .collect();
    RealTensor { shape: x.shape.clone(), data }
}

/// Applies real weights to each plane independently.
///
/// `w` of shape `[n]` contracts the flattened input of `n` elements into one
/// quaternion (`xᵀw`, output shape `[1]`); `w` of shape `[m, n]` maps it to
/// `m` quaternions.
pub fn apply_real_linear<T: Scalar>(x: &QTensor<T>, w: &RealTensor<T>) -> Result<QTensor<T>> {
    let n = x.len();
    let (m, cols) = match w.shape.as_slice() {
        [cols] => (1, *cols),
        [m, cols] => (*m, *cols),
        other => {
            return Err(Error::ShapeMismatch(format!("weight of rank {}", other.len())))
        }
    };
    if cols != n {
        return Err(Error::ShapeMismatch(format!(
            "weight contracts {cols} elements, input has {n}"
        )));
    }
    let planes = std::array::from_fn(|p| {
        let xp = &x.planes[p];
        (0..m)
            .map(|row| {
                let wr = &w.data[row * n..(row + 1) * n];
                wr.iter().zip(xp).fold(T::zero(), |acc, (&a, &b)| acc + a * b)
            })
            .collect()
    });
    Ok(QTensor { shape: vec![m], planes })
}

const FEATURE_MAGIC: &[u8; 4] = b"QTF1";

impl QTensor<f32> {
    /// Serializes to the `QTF1` feature format: magic, u8 rank, u32 extents,
    /// then planes r, i, j, k as little-endian f32.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        if self.shape.len() > u8::MAX as usize {
            return Err(Error::ShapeMismatch(format!("rank {} too large", self.shape.len())));
        }
        w.write_all(FEATURE_MAGIC)?;
        w.write_all(&[self.shape.len() as u8])?;
        for &e in &self.shape {
            let e = u32::try_from(e)
                .map_err(|_| Error::ShapeMismatch(format!("extent {e} exceeds u32")))?;
            w.write_all(&e.to_le_bytes())?;
        }
        for plane in &self.planes {
            let mut buf = Vec::with_capacity(plane.len() * 4);
            for v in plane {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 5 {
            return Err(Error::Corrupt("feature file shorter than its header".into()));
        }
        if &bytes[..4] != FEATURE_MAGIC {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(FEATURE_MAGIC).into_owned(),
                found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
            });
        }
        let rank = bytes[4] as usize;
        let mut pos = 5;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let chunk = bytes
                .get(pos..pos + 4)
                .ok_or_else(|| Error::Corrupt("truncated extents".into()))?;
            shape.push(u32::from_le_bytes(chunk.try_into().unwrap()) as usize);
            pos += 4;
        }
        let n = volume(&shape);
        let need = n
            .checked_mul(16)
            .ok_or_else(|| Error::Corrupt("extent product overflows".into()))?;
        let body = &bytes[pos..];
        if body.len() != need {
            return Err(Error::Corrupt(format!(
                "expected {need} bytes of plane data, found {}",
                body.len()
            )));
        }
        let planes = std::array::from_fn(|p| {
            body[p * n * 4..(p + 1) * n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        });
        Ok(QTensor { shape, planes })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quat::{conjugate, rotate, rotor, sample_rotation};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_real(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> RealTensor<f64> {
        RealTensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn random_pure(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> QTensor<f64> {
        let a = random_real(rng, shape.clone());
        let b = random_real(rng, shape.clone());
        let c = random_real(rng, shape);
        lift(&a, &b, &c).unwrap()
    }

    #[test]
    fn lift_places_planes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = random_real(&mut rng, vec![2, 3]);
        let z = RealTensor::zeros(vec![2, 3]);
        let x = lift(&a, &z, &z).unwrap();
        assert_eq!(x.project(1), a);
        assert!(x.plane(0).iter().chain(x.plane(2)).chain(x.plane(3)).all(|&v| v == 0.0));

        let (b, c) = (random_real(&mut rng, vec![2, 3]), random_real(&mut rng, vec![2, 3]));
        let x = lift(&a, &b, &c).unwrap();
        for v in 0..6 {
            assert_eq!(x.get(v), Quaternion::new(0.0, a.data()[v], b.data()[v], c.data()[v]));
        }
        assert!(matches!(
            lift(&a, &RealTensor::zeros(vec![3, 2]), &c),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn rotate_all_matches_scalar_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_pure(&mut rng, vec![10]);
        assert_eq!(rotate_all(Quaternion::ONE, &x).unwrap(), x);
        let r = rotor(&sample_rotation(9)).unwrap();
        let y = rotate_all(r, &x).unwrap();
        assert!(y.is_pure());
        for v in 0..10 {
            let expect = rotate(r, x.get(v)).unwrap();
            assert!((y.get(v) - expect).norm() < 1e-12);
        }
        assert!(rotate_all(Quaternion::new(0.5, 0.0, 0.0, 0.0), &x).is_err());
    }

    #[test]
    fn rotate_all_inverse_in_single_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: QTensor<f32> = random_pure(&mut rng, vec![4, 5]).cast();
        let r = rotor(&sample_rotation(3)).unwrap();
        let back = rotate_all(r, &rotate_all(conjugate(r), &x).unwrap()).unwrap();
        for p in 0..4 {
            for (a, b) in back.plane(p).iter().zip(x.plane(p)) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn norm_map_examples() {
        let a = RealTensor::new(vec![3], vec![-2.0f64, 0.0, 1.5]).unwrap();
        let z = RealTensor::zeros(vec![3]);
        assert_eq!(norm_map(&lift(&a, &z, &z).unwrap()).data(), &[2.0, 0.0, 1.5]);
        let mut x = QTensor::<f64>::zeros(vec![1]);
        x.set(0, Quaternion::new(0.0, 3.0, 4.0, 0.0));
        assert_eq!(norm_map(&x).data(), &[5.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: QTensor<f32> = random_pure(&mut rng, vec![50]).cast();
        let r = rotor(&sample_rotation(5)).unwrap();
        let n0 = norm_map(&x);
        let n1 = norm_map(&rotate_all(r, &x).unwrap());
        assert!(n0.max_abs_diff(&n1) <= 1e-6);
    }

    #[test]
    fn real_linear_examples() {
        let mut x = QTensor::<f64>::zeros(vec![1]);
        x.set(0, Quaternion::new(0.0, 2.0, 3.0, 4.0));
        let w = RealTensor::new(vec![1], vec![2.0]).unwrap();
        assert_eq!(apply_real_linear(&x, &w).unwrap().get(0), Quaternion::new(0.0, 4.0, 6.0, 8.0));

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_pure(&mut rng, vec![5]);
        let eye = RealTensor::from_fn(vec![5, 5], |i| if i / 5 == i % 5 { 1.0 } else { 0.0 });
        assert_eq!(apply_real_linear(&x, &eye).unwrap(), x);
        assert!(apply_real_linear(&x, &RealTensor::zeros(vec![2, 4])).is_err());
    }

    #[test]
    fn real_linear_on_lift_is_three_real_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (a, b, c) = (
            random_real(&mut rng, vec![6]),
            random_real(&mut rng, vec![6]),
            random_real(&mut rng, vec![6]),
        );
        let w = random_real(&mut rng, vec![4, 6]);
        let y = apply_real_linear(&lift(&a, &b, &c).unwrap(), &w).unwrap();
        let matvec = |v: &RealTensor<f64>| -> Vec<f64> {
            (0..4).map(|r| (0..6).map(|k| w.data()[r * 6 + k] * v.data()[k]).sum()).collect()
        };
        assert!(y.plane(0).iter().all(|&v| v == 0.0));
        for (p, src) in [(1, &a), (2, &b), (3, &c)] {
            for (got, want) in y.plane(p).iter().zip(matvec(src)) {
                assert!((got - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn real_linear_commutes_with_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for seed in 0..50 {
            let x: QTensor<f32> = random_pure(&mut rng, vec![8]).cast();
            let w: RealTensor<f32> = random_real(&mut rng, vec![3, 8]).cast();
            let r = rotor(&sample_rotation(seed)).unwrap();
            let lhs = apply_real_linear(&rotate_all(r, &x).unwrap(), &w).unwrap();
            let rhs = rotate_all(r, &apply_real_linear(&x, &w).unwrap()).unwrap();
            assert!(lhs.relative_error(&rhs) <= 1e-6);
        }
    }

    #[test]
    fn feature_file_rejects_bad_input() {
        let x = QTensor::<f32>::zeros(vec![2, 2]);
        let mut bytes = x.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(QTensor::from_bytes(&bytes), Err(Error::BadMagic { .. })));
        let bytes = x.to_bytes();
        assert!(matches!(
            QTensor::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Corrupt(_))
        ));
        assert!(QTensor::from_bytes(b"QT").is_err());
    }

    proptest! {
        #[test]
        fn feature_file_round_trip_is_bit_exact(
            shape in proptest::collection::vec(1usize..4, 0..4),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = volume(&shape);
            let planes: [Vec<f32>; 4] = std::array::from_fn(|_| {
                (0..n).map(|_| f32::from_bits(rng.random::<u32>() & 0x7f7f_ffff)).collect()
            });
            let x = QTensor::new(shape, planes).unwrap();
            let back = QTensor::from_bytes(&x.to_bytes()).unwrap();
            prop_assert_eq!(back.shape(), x.shape());
            for p in 0..4 {
                let a: Vec<u32> = back.plane(p).iter().map(|v| v.to_bits()).collect();
                let b: Vec<u32> = x.plane(p).iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn rotate_all_is_linear(seed in any::<u64>(), s in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_pure(&mut rng, vec![7]);
            let y = random_pure(&mut rng, vec![7]);
            let r = rotor(&sample_rotation(seed)).unwrap();
            let lhs = rotate_all(r, &x.add(&y.scale(s)).unwrap()).unwrap();
            let rhs = rotate_all(r, &x).unwrap().add(&rotate_all(r, &y).unwrap().scale(s)).unwrap();
            prop_assert!(lhs.relative_error(&rhs) <= 1e-12);
        }
    }
}
