//! Core algorithms for polygon-matched positive mining and desk-scale
//! self-supervised representation learning.
//!
//! The pipeline: image-space bounding boxes are projected onto the floor
//! plane through the camera's floor homography ([`geometry`]), the resulting
//! convex footprints are intersected ([`polygon`]) and matched into positive
//! candidate lists ([`miner`]), which drive the positive-sampling regime of
//! a small self-supervised trainer ([`ssl`]) evaluated by linear probing
//! ([`eval`]). A synthetic scene generator ([`simulator`]) provides ground
//! truth for precision/recall scoring.
//!
//! The crate is `no_std` + `alloc`; all IO lives in the companion CLI crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod eval;
pub mod geometry;
pub mod math;
pub mod miner;
pub mod mlp;
pub mod polygon;
pub mod rng;
pub mod simulator;
pub mod ssl;
