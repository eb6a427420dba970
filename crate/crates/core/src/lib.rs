//! Neutral-kaon decay laboratory.
//!
//! Simulates kaon decays in a planar detector geometry, quantifies the
//! spreading of the decay-product wave packets, and reconstructs decay
//! vertices and decay times either with classical straight-line
//! back-propagation or with Bohmian trajectory retrodiction.
//!
//! Everything in the core is SI: metres, seconds, kilograms, joules.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bohm;
pub mod config;
pub mod constants;
pub mod event;
pub mod gaussian_packet;
pub mod kaon;
pub mod optimize;
pub mod pipeline;
pub mod quantum;
pub mod reconstruction;
pub mod rng;
pub mod stats;
pub mod validate;
pub mod vec2;

pub use constants::PhysicsConstants;
pub use gaussian_packet::GaussianPacket;
pub use vec2::Vec2;
