//! Operators, bounds and experiments for spatiotemporal over-squashing.

pub mod engine;
pub mod linalg;
pub mod sensitivity;
pub mod spatial;
pub mod temporal;
pub mod tasks;
