//! Shortcut-aware reasoning training.
//!
//! A small GPT-style transformer is trained on synthetic reasoning tasks that
//! carry an injected shortcut rule. Per-sample gradients are compared with a
//! validation gradient and split by answer versus reasoning tokens; samples
//! that look shortcut-driven are down-weighted and their gradients are
//! projected before the optimizer step.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod optim;
pub mod par;
pub mod surgery;
pub mod trainer;

pub use error::{Error, Result};
