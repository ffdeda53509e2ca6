pub mod bench;
pub mod episode;
pub mod error;
pub mod orca;
pub mod planner;
pub mod policy;
pub mod scenario;
pub mod sim;
pub mod state;
pub mod train;

pub use error::{Error, Result};

/// The guide's code samples, compiled and run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/simulator.md")]
    struct Simulator;
    #[doc = include_str!("../../../book/src/scenarios.md")]
    struct Scenarios;
    #[doc = include_str!("../../../book/src/tensorgrad.md")]
    struct Autodiff;
    #[doc = include_str!("../../../book/src/policy.md")]
    struct PolicyNetwork;
    #[doc = include_str!("../../../book/src/orca.md")]
    struct Orca;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    struct Evaluation;
    #[doc = include_str!("../../../book/src/formats.md")]
    struct Formats;
}
