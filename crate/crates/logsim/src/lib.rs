//! Closed-loop traffic simulation by log replay with conflict-aware
//! takeover.
//!
//! Recorded agents replay their logs exactly until a predicted
//! spatio-temporal conflict would make the scene unrealistic. At that
//! point — and only then — the conflicting background agent is taken
//! over, steered through the conflict, and handed back to replay once
//! the conflict is resolved. Realism is maximized by minimizing
//! intervention.
//!
//! The pipeline per tick: select agents in the region of interest around
//! the ego, predict their futures ([`predict`]), detect pairwise
//! bounding-box conflicts on those futures ([`conflict`]), assign a
//! yielder per conflict and drive it with the takeover controller
//! ([`control`]), then step the world ([`engine`]). Traces are scored by
//! the [`metrics`] suite; [`learning`] trains an alternative takeover
//! policy from expert demonstrations plus environment rewards.
//!
//! The `book/` directory of the repository walks through every stage
//! with runnable examples; those examples compile and run as doctests of
//! this crate.

pub mod cli;
pub mod conflict;
pub mod control;
pub mod engine;
pub mod geometry;
pub mod learning;
pub mod map;
pub mod metrics;
pub mod nn;
pub mod predict;
pub mod scenario;
pub mod synth;

// Keep the book's code fences honest: every chapter compiles and its
// assertions run under `cargo test --doc`.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data-model.md")]
    mod data_model {}
    #[doc = include_str!("../../../book/src/conflict-detection.md")]
    mod conflict_detection {}
    #[doc = include_str!("../../../book/src/motion-prediction.md")]
    mod motion_prediction {}
    #[doc = include_str!("../../../book/src/takeover-controller.md")]
    mod takeover_controller {}
    #[doc = include_str!("../../../book/src/simulation-loop.md")]
    mod simulation_loop {}
    #[doc = include_str!("../../../book/src/policy-learning.md")]
    mod policy_learning {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics_chapter {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli_chapter {}
}
