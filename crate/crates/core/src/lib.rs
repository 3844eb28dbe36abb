//! Risk-sensitive multi-agent scheduling for networked microgrids.

pub mod agent;
pub mod config;
pub mod critic;
pub mod env;
mod error;
pub mod memory;
pub mod neural;
pub mod risk;
pub mod scenarios;
pub mod shapley;
pub mod trainer;

pub use error::{Error, Result};

// The guide's snippets run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/environment.md")]
    mod environment {}
    #[doc = include_str!("../../../book/src/scenarios.md")]
    mod scenarios {}
    #[doc = include_str!("../../../book/src/risk.md")]
    mod risk {}
    #[doc = include_str!("../../../book/src/critic.md")]
    mod critic {}
    #[doc = include_str!("../../../book/src/memory.md")]
    mod memory {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/shapley.md")]
    mod shapley {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
