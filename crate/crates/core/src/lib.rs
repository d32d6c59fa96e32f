//! Core of a 3D-aware image diffusion model.
//!
//! The denoiser encodes a noisy image into a triplane neural field with a
//! U-Net and volume-renders that field back from the input camera. Every
//! numerical component lives here: a small reverse-mode autodiff engine,
//! the cosine noise schedule, pinhole cameras, triplane sampling and
//! decoding, two-pass volume rendering, the encoder, the training objective,
//! the samplers, an analytic reference ray-tracer for procedural scenes and
//! the image metrics.
//!
//! The crate is `no_std` (with `alloc`) when the default `std` feature is
//! disabled. File formats, the command line and anything touching the
//! filesystem live in the companion `tridiff` crate.
#![cfg_attr(not(feature = "std"), no_std)]
#![warn(missing_debug_implementations)]

extern crate alloc;

pub mod autodiff;
pub mod camera;
pub mod denoiser;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod op_suite;
pub mod params;
pub mod render;
pub mod rng;
pub mod samplers;
pub mod scene;
pub mod schedule;
pub mod tensor;
pub mod training;
pub mod triplane;
pub mod unet;

pub use autodiff::{Gradients, Tape, Var};
pub use camera::{Camera, Ray};
pub use error::{Error, Result};
pub use schedule::NoiseSchedule;
pub use tensor::{Real, Tensor};
