pub mod affine_model;
pub mod bsde;
pub mod error;
pub mod riccati;
pub mod portfolio;
mod sampling;
pub mod simulator;
pub mod symcone;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/cones.md")]
    mod cones {}
    #[doc = include_str!("../../../book/src/riccati.md")]
    mod riccati {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/portfolio.md")]
    mod portfolio {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
}
