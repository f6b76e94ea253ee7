//! Numerical toolkit for hybrid classical-quantum state redistribution.
//!
//! The crate evaluates one-shot and asymptotic rate regions from smooth
//! conditional entropies, simulates randomized partial decoupling, and
//! assembles explicit encoder/decoder pairs at small dimension.
//!
//! Module layering, bottom up: [`numkit`] (dense complex algebra),
//! [`sdp`] (interior-point solver), [`qstate`] (registers and sources),
//! [`entropy`], [`region`], [`decouple`], [`protocol`], [`cli`].

pub mod cli;
pub mod decouple;
pub mod entropy;
pub mod numkit;
pub mod protocol;
pub mod qstate;
pub mod region;
pub mod sdp;

mod error;

pub use error::{Error, Result};
pub use numkit::{CMatrix, C64};
