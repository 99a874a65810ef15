//! Independent reference implementations used as test oracles.
//!
//! Everything here recomputes quantities the main crate produces, by a
//! different and deliberately brute-force route: dense line sampling instead
//! of grid traversal, literal formula transcription instead of incremental
//! evaluation, finite differences instead of analytic gradients. Slow and
//! simple on purpose; never used outside tests.

pub mod fd;
pub mod gaussian;
pub mod los;
pub mod reward;
pub mod scenes;
