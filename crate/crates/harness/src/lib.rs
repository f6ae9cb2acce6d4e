//! Experiment harness: run storage, single runs, grids, reports and cost timing.

pub mod cost;
pub mod experiment;
pub mod grid;
pub mod plot;
pub mod report;
pub mod store;
