//! Pel-recursive motion estimation.

pub mod classify;
pub mod field;
pub mod frame;
pub mod solver;
pub mod synth;

pub use classify::{classify_scores, Membership, ScoreClass};
pub use field::{estimate_field, imc, DisplacementField, FieldConfig, Init};
pub use frame::{bilinear_cell, bilinear_sample, dfd, BorderPolicy, Frame, Sample};
pub use solver::{build_system, solve_update, MaskSpec, Retention, SolverSpec, System};
