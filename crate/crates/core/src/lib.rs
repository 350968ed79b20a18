//! Guided sampling for 2D flow-matching models under compositional rewards.
//!
//! The crate trains a base velocity field by conditional flow matching,
//! steers it at inference time with additive reward guidance (plain sum,
//! PCGrad deconfliction, or conflict-aware blending with a learned value
//! gradient), learns that value gradient by terminal value regression, and
//! ships the benchmark harness used to measure all of it on a three-mode
//! Gaussian mixture.
//!
//! Module map:
//!
//! - [`nn`]: dense networks with exact parameter and input gradients, Adam.
//! - [`mog`]: the Gaussian-mixture world, Bayes classifiers, analytic oracles.
//! - [`rewards`]: differentiable reward terms and composite reward sets.
//! - [`cfm`]: conditional flow matching training of the base field.
//! - [`guidance`]: per-step guidance, conflict score, energy dissipation, composition rules.
//! - [`value`]: rollout collection and terminal value regression.
//! - [`sampler`]: guided Euler integration and batch reports.
//! - [`bench`]: metrics, landscapes, spurious minima, experiments, figures.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod cfm;
pub mod error;
pub mod guidance;
pub mod mog;
pub mod nn;
pub mod rewards;
pub mod rng;
pub mod sampler;
pub mod value;
pub mod vec2;

pub use error::{Error, Result};
pub use vec2::Vec2;
