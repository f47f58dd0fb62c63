#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x >= 0.0)` also rejects NaN

pub mod apparatus;
pub mod certify;
pub mod error;
pub mod exec;
pub mod fock;
pub mod gge;
pub mod hamiltonian;
pub mod linalg;
pub mod oracle;
pub mod permanent;

pub use error::{Error, Result};
pub use exec::Execution;
pub use fock::{Distinguishability, FockDistribution, ModeOccupation, SpeciesPartition};
pub use linalg::{ComplexMatrix, HermitianMatrix};
