//! Federated standardization, confound correction and PCA over data held by
//! several centers.
//!
//! Centers share feature moments, consensus-ADMM weight iterates and
//! truncated local eigendecompositions with a coordinator. The coordinator
//! never sees subject-level rows.

pub mod admm;
pub mod config;
pub mod error;
pub mod federation;
pub mod fpca;
pub mod linalg;
pub mod oracle;
pub mod stats;
pub mod synth;
pub mod wire;

pub use error::{CenterId, Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/standardization.md")]
    mod standardization {}
    #[doc = include_str!("../../../book/src/admm.md")]
    mod admm {}
    #[doc = include_str!("../../../book/src/fpca.md")]
    mod fpca {}
    #[doc = include_str!("../../../book/src/federation.md")]
    mod federation {}
    #[doc = include_str!("../../../book/src/synthdata.md")]
    mod synthdata {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
