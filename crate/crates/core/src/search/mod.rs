//! Budgeted workflow search over a synthetic space, comparing how candidates
//! are scored: at random, by the surrogate, or by the ground-truth oracle.

pub mod oracle;
pub mod run;
pub mod space;

pub use oracle::*;
pub use run::*;
pub use space::*;
