//! Iso-parameter depth/width laboratory for decoder-only transformers.
//!
//! The crate builds families of transformer shapes that trade depth for
//! feed-forward width at a fixed total parameter count, trains them at desk
//! scale on synthetic compositional-generalization tasks, and provides the
//! measurement tooling (perplexity-matched checkpoints, feed-forward rank
//! profiles, step-latency regression) needed to compare family members.

pub mod analysis;
pub mod budget;
pub mod model;
pub mod numerics;
pub mod seeding;
pub mod sweep;
pub mod tasks;
pub mod training;
