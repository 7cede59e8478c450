//! Finite-difference verification of every differentiable operation.

pub mod fd;
pub mod scenes;
pub mod suite;
