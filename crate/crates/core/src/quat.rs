//! Quaternion arithmetic, rotors and rotation keys.
//!
//! A [`Quaternion`] is `q0 + q1 i + q2 j + q3 k` at double precision. A
//! [`RotationKey`] holds a unit axis and an angle; its [`rotor`] is the unit
//! quaternion `cos(θ/2) + sin(θ/2)(o1 i + o2 j + o3 k)`, and a pure quaternion
//! is rotated by conjugation `R x R̄`.

use std::f64::consts::TAU;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Tolerance on `‖R‖ = 1` accepted by [`rotate`].
pub const ROTOR_TOLERANCE: f64 = 1e-6;
/// Tolerance on `‖o‖ = 1` accepted for key axes.
pub const AXIS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Quaternion {
    pub q0: f64,
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
}

impl Quaternion {
    pub const ONE: Quaternion = Quaternion::new(1.0, 0.0, 0.0, 0.0);
    pub const I: Quaternion = Quaternion::new(0.0, 1.0, 0.0, 0.0);
    pub const J: Quaternion = Quaternion::new(0.0, 0.0, 1.0, 0.0);
    pub const K: Quaternion = Quaternion::new(0.0, 0.0, 0.0, 1.0);
    pub const ZERO: Quaternion = Quaternion::new(0.0, 0.0, 0.0, 0.0);

    pub const fn new(q0: f64, q1: f64, q2: f64, q3: f64) -> Self {
        Quaternion { q0, q1, q2, q3 }
    }

    /// Pure quaternion `0 + v1 i + v2 j + v3 k`.
    pub const fn pure(v: [f64; 3]) -> Self {
        Quaternion::new(0.0, v[0], v[1], v[2])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.q0, self.q1, self.q2, self.q3]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Quaternion::new(a[0], a[1], a[2], a[3])
    }

    /// Imaginary part as a 3-vector.
    pub fn vector(self) -> [f64; 3] {
        [self.q1, self.q2, self.q3]
    }

    pub fn norm_squared(self) -> f64 {
        self.q0 * self.q0 + self.q1 * self.q1 + self.q2 * self.q2 + self.q3 * self.q3
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn is_pure(self) -> bool {
        self.q0 == 0.0
    }

    pub fn scale(self, s: f64) -> Self {
        Quaternion::new(self.q0 * s, self.q1 * s, self.q2 * s, self.q3 * s)
    }

    pub fn conjugate(self) -> Self {
        conjugate(self)
    }

    /// The 4×4 real matrix `M` with `M·x = R x R̄` on component vectors.
    ///
    /// Row and column 0 are the identity on the real part; the lower 3×3
    /// block is the rotation matrix of the (assumed unit) rotor.
    pub fn conjugation_matrix(self) -> [[f64; 4]; 4] {
        let Quaternion { q0: w, q1: x, q2: y, q3: z } = self;
        [
            [1.0, 0.0, 0.0, 0.0],
            [
                0.0,
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                0.0,
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                0.0,
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }
}

/// Hamilton product with `i² = j² = k² = ijk = −1`.
pub fn qmul(p: Quaternion, q: Quaternion) -> Quaternion {
    Quaternion::new(
        p.q0 * q.q0 - p.q1 * q.q1 - p.q2 * q.q2 - p.q3 * q.q3,
        p.q0 * q.q1 + p.q1 * q.q0 + p.q2 * q.q3 - p.q3 * q.q2,
        p.q0 * q.q2 - p.q1 * q.q3 + p.q2 * q.q0 + p.q3 * q.q1,
        p.q0 * q.q3 + p.q1 * q.q2 - p.q2 * q.q1 + p.q3 * q.q0,
    )
}

pub fn conjugate(q: Quaternion) -> Quaternion {
    Quaternion::new(q.q0, -q.q1, -q.q2, -q.q3)
}

/// Rotates `x` by conjugation, `R x R̄`.
///
/// `R` must be a unit quaternion within [`ROTOR_TOLERANCE`]. The real part of
/// `x` passes through unchanged, so pure inputs give pure outputs.
pub fn rotate(r: Quaternion, x: Quaternion) -> Result<Quaternion> {
    check_unit(r)?;
    let mut out = qmul(qmul(r, x), conjugate(r));
    if x.is_pure() {
        out.q0 = 0.0;
    }
    Ok(out)
}

pub(crate) fn check_unit(r: Quaternion) -> Result<()> {
    let n = r.norm();
    if (n - 1.0).abs() > ROTOR_TOLERANCE || !n.is_finite() {
        return Err(Error::NonUnitRotor(n));
    }
    Ok(())
}

impl Add for Quaternion {
    type Output = Quaternion;
    fn add(self, o: Quaternion) -> Quaternion {
        Quaternion::new(self.q0 + o.q0, self.q1 + o.q1, self.q2 + o.q2, self.q3 + o.q3)
    }
}

impl Sub for Quaternion {
    type Output = Quaternion;
    fn sub(self, o: Quaternion) -> Quaternion {
        Quaternion::new(self.q0 - o.q0, self.q1 - o.q1, self.q2 - o.q2, self.q3 - o.q3)
    }
}

impl Neg for Quaternion {
    type Output = Quaternion;
    fn neg(self) -> Quaternion {
        self.scale(-1.0)
    }
}

impl Mul for Quaternion {
    type Output = Quaternion;
    fn mul(self, o: Quaternion) -> Quaternion {
        qmul(self, o)
    }
}

impl Mul<f64> for Quaternion {
    type Output = Quaternion;
    fn mul(self, s: f64) -> Quaternion {
        self.scale(s)
    }
}

impl fmt::Display for Quaternion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} + {}i + {}j + {}k", self.q0, self.q1, self.q2, self.q3)
    }
}

/// The private key: a unit rotation axis and an angle in `[0, 2π)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationKey {
    axis: [f64; 3],
    angle: f64,
    seed: u64,
}

impl RotationKey {
    /// Builds a key, normalizing `axis` and wrapping `angle` into `[0, 2π)`.
    pub fn new(axis: [f64; 3], angle: f64, seed: u64) -> Result<Self> {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if !(n.is_finite() && n > 0.0) || !angle.is_finite() {
            return Err(Error::InvalidKey(format!(
                "axis {axis:?} / angle {angle} cannot define a rotation"
            )));
        }
        let axis = [axis[0] / n, axis[1] / n, axis[2] / n];
        Ok(RotationKey { axis, angle: wrap_angle(angle), seed })
    }

    /// Builds a key from stored parts without normalizing, rejecting a
    /// non-unit axis or an angle outside `[0, 2π)`.
    pub fn from_parts(axis: [f64; 3], angle: f64, seed: u64) -> Result<Self> {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if !n.is_finite() || (n - 1.0).abs() > AXIS_TOLERANCE {
            return Err(Error::InvalidKey(format!("axis norm {n} is not 1")));
        }
        if !(0.0..TAU).contains(&angle) {
            return Err(Error::InvalidKey(format!("angle {angle} outside [0, 2π)")));
        }
        Ok(RotationKey { axis, angle, seed })
    }

    /// The identity key (θ = 0).
    pub fn identity() -> Self {
        RotationKey { axis: [0.0, 0.0, 1.0], angle: 0.0, seed: 0 }
    }

    pub fn axis(&self) -> [f64; 3] {
        self.axis
    }

    pub fn angle(&self) -> f64 {
        self.angle
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_identity(&self) -> bool {
        self.angle == 0.0
    }

    pub fn rotor(&self) -> Result<Quaternion> {
        rotor(self)
    }

    /// Text form: `axis: o1 o2 o3`, `angle: θ`, `seed: n`, reals with 17
    /// significant digits.
    pub fn to_text(&self) -> String {
        format!(
            "axis: {:.16e} {:.16e} {:.16e}\nangle: {:.16e}\nseed: {}\n",
            self.axis[0], self.axis[1], self.axis[2], self.angle, self.seed
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut axis = None;
        let mut angle = None;
        let mut seed = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (name, value) = line
                .split_once(':')
                .ok_or_else(|| Error::Corrupt(format!("key line without ':': {line:?}")))?;
            let value = value.trim();
            match name.trim() {
                "axis" => {
                    let parts = value
                        .split_whitespace()
                        .map(parse_real)
                        .collect::<Result<Vec<_>>>()?;
                    if parts.len() != 3 {
                        return Err(Error::Corrupt(format!(
                            "axis needs 3 components, found {}",
                            parts.len()
                        )));
                    }
                    axis = Some([parts[0], parts[1], parts[2]]);
                }
                "angle" => angle = Some(parse_real(value)?),
                "seed" => {
                    seed = Some(value.parse::<u64>().map_err(|e| {
                        Error::Corrupt(format!("bad seed {value:?}: {e}"))
                    })?)
                }
                other => return Err(Error::Corrupt(format!("unknown key field {other:?}"))),
            }
        }
        match (axis, angle, seed) {
            (Some(axis), Some(angle), Some(seed)) => RotationKey::from_parts(axis, angle, seed),
            _ => Err(Error::Corrupt("key file needs axis, angle and seed".into())),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        RotationKey::from_text(&text)
    }

    /// Opaque 64-bit identifier of the key's text form. It identifies a key
    /// without revealing it.
    pub fn key_id(&self) -> u64 {
        let digest = Sha256::digest(self.to_text().as_bytes());
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(bytes)
    }
}

fn parse_real(s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|e| Error::Corrupt(format!("bad real {s:?}: {e}")))
}

fn wrap_angle(angle: f64) -> f64 {
    let a = angle.rem_euclid(TAU);
    if a >= TAU {
        0.0
    } else {
        a
    }
}

/// `cos(θ/2) + sin(θ/2)(o1 i + o2 j + o3 k)`.
pub fn rotor(key: &RotationKey) -> Result<Quaternion> {
    let [o1, o2, o3] = key.axis;
    let n = (o1 * o1 + o2 * o2 + o3 * o3).sqrt();
    if (n - 1.0).abs() > AXIS_TOLERANCE {
        return Err(Error::InvalidKey(format!("axis norm {n} is not 1")));
    }
    let (s, c) = (key.angle / 2.0).sin_cos();
    Ok(Quaternion::new(c, s * o1, s * o2, s * o3))
}

/// Samples a key deterministically from `seed`: the axis is a normalized
/// standard Gaussian 3-vector (uniform on the sphere) and the angle is
/// uniform on `[0, 2π)`.
pub fn sample_rotation(seed: u64) -> RotationKey {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let v: [f64; 3] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n < 1e-12 {
            continue;
        }
        let angle = wrap_angle(rng.random::<f64>() * TAU);
        return RotationKey { axis: [v[0] / n, v[1] / n, v[2] / n], angle, seed };
    }
}

/// Draws a fresh key from a running generator, recording the per-key seed.
pub fn sample_rotation_from<R: Rng + ?Sized>(rng: &mut R) -> RotationKey {
    sample_rotation(rng.random::<u64>())
}

/// Angle in `[0, π]` between the unit vectors `u` and `v`.
pub fn angle_between(u: [f64; 3], v: [f64; 3]) -> f64 {
    let nu = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
    let nv = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let dot = (u[0] * v[0] + u[1] * v[1] + u[2] * v[2]) / (nu * nv);
    dot.clamp(-1.0, 1.0).acos()
}
