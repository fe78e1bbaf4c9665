//! Denoising and recognition of face-like 3D point clouds.
//!
//! The pipeline maps a noisy cloud onto the three orthogonal planes (x-y,
//! y-z, z-x) with the coordinate orthogonal to each plane as a gray value,
//! denoises each plane image with an adversarially trained generator, and
//! recombines the denoised gray values into a cloud. Identities are then
//! classified by a linked dynamic graph CNN over per-layer KNN graphs.
//!
//! This crate is `no_std` (alloc required) and holds everything that is pure
//! computation: the reverse-mode tensor engine, plane projection, networks,
//! training loops, metrics and the synthetic dataset generator. File formats
//! and the CLI live in the companion `topdenoise` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
#[macro_use]
extern crate std;

use alloc::string::String;
use core::fmt;

pub mod gan;
pub mod math;
pub mod metrics;
pub mod pointcloud;
pub mod projection;
pub mod recognizer;
pub mod rng;
pub mod synth;
pub mod tensor;

/// Error type shared by all core operations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Tensor or array shapes do not line up.
    Dimension(String),
    /// An argument violates an operation's preconditions.
    Argument(String),
    /// Input geometry is degenerate (coincident points, empty range).
    Degenerate(String),
    /// A required piece of state (weights, checkpoints) is missing.
    State(String),
    /// A forward op produced NaN or infinity from finite input.
    NonFinite(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(msg) => write!(f, "dimension error: {msg}"),
            Error::Argument(msg) => write!(f, "argument error: {msg}"),
            Error::Degenerate(msg) => write!(f, "degenerate input: {msg}"),
            Error::State(msg) => write!(f, "state error: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite result: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
