//! Policy iteration for continuous-time stochastic H-infinity control posed
//! as a linear-quadratic zero-sum differential game.
//!
//! * [`exact_pi`]: model-based two-loop policy iteration.
//! * [`adp`]: the same iteration driven only by trajectory moments.
//! * [`robust`]: policy iteration with injected disturbances and
//!   input-to-state-stability measurements.
//!
//! The crate is `no_std` and only needs `alloc`.
#![no_std]

extern crate alloc;

pub mod adp;
pub mod error;
pub mod exact_pi;
pub mod game;
pub mod matops;
pub mod problems;
pub mod robust;
pub mod simulate;

pub use error::{Error, Result};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
