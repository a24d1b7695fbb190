//! Quaternion-valued neural networks that hide a feature in a secret
//! rotation phase.
//!
//! An encoder maps an input to a real feature `a`, pairs it with two fooling
//! features `b`, `c` as the pure quaternion tensor `0 + a i + b j + c k`, and
//! rotates every element by a secret rotor `R`. A processing module built
//! only from rotation-equivariant layers runs on the rotated tensor without
//! the key, and the key holder undoes the rotation and reads the `i` plane.
//!
//! The crate also contains a small reverse-mode autograd engine for training,
//! the adversarial encoder objective, desk-scale attackers and privacy
//! metrics, and synthetic data generation.

pub mod attack;
pub mod autograd;
pub mod data;
pub mod error;
pub mod kernels;
pub mod layers;
pub mod network;
pub mod qtensor;
pub mod quat;
pub mod train;

pub use error::{Error, Result};
pub use layers::{LayerKind, LayerSpec, PoolMask};
pub use qtensor::{QTensor, RealTensor, Scalar};
pub use quat::{Quaternion, RotationKey};
