//! Core numerics for a desk-scale diffusion-transformer fine-tuning lab.
//!
//! Everything in this crate is pure computation: given the same inputs and
//! seeds it produces the same bytes, on any thread, with no IO. The crate is
//! `no_std` (alloc only); file formats, the CLI, and experiment orchestration
//! live in the companion `difffit-lab` crate.
//!
//! Module map:
//! - [`tensor`] / [`tape`]: a flat row-major matrix type and a minimal
//!   reverse-mode autodiff tape built on top of it.
//! - [`schedule`] / [`loss`] / [`sampler`]: discrete-time DDPM machinery
//!   (variance schedules, forward corruption, simple/VLB/hybrid losses,
//!   ancestral sampling with classifier-free guidance).
//! - [`model`]: a miniature diffusion transformer with patchify, adaLN-style
//!   conditioned blocks, insertable per-channel scale factors, and 2D
//!   sin/cos positional encodings with a coordinate-divisor knob.
//! - [`peft`]: parameter-selection policies, model surgery (scale factors,
//!   LoRA, adapters, visual prompts), the freeze engine, AdamW, and the
//!   training loop.
//! - [`theory`]: scale-factor recovery experiments — least-squares /
//!   gradient-descent estimation, the recovery-error bound, and Monte-Carlo
//!   checks of the supporting concentration lemmas.
//! - [`data`] / [`frechet`]: deterministic toy datasets and a Gaussian
//!   Fréchet distance on (optionally projected) pixels.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod data;
pub mod digest;
pub mod error;
pub mod frechet;
pub mod linalg;
pub mod loss;
pub mod math;
pub mod model;
pub mod peft;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tape;
pub mod tensor;
pub mod theory;

pub use error::{CoreError, Result};
pub use tensor::Matrix;
