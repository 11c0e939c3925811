//! Deterministic discrete-event simulation of segment prefetching in
//! peer-to-peer video-on-demand swarms.

pub mod analytics;
pub mod compare;
pub mod config;
pub mod domain;
pub mod engine;
pub mod error;
pub mod gossip;
pub mod metrics;
pub mod overlay;
pub mod seeds;
pub mod strategies;
pub mod time;
pub mod topology;
pub mod transfer;
pub mod workload;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use strategies::Strategy;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/scenarios.md")]
    mod scenarios {}
    #[doc = include_str!("../../../book/src/strategies.md")]
    mod strategies {}
    #[doc = include_str!("../../../book/src/library.md")]
    mod library {}
    #[doc = include_str!("../../../book/src/analytics.md")]
    mod analytics {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/determinism.md")]
    mod determinism {}
}
