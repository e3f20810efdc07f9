//! Sparse and dense tensor types, `.tns` ingestion and the dense kernels
//! used by CP-ALS.

mod coo;
mod dense;
mod kernels;
mod tns;

pub use coo::SparseTensorCoo;
pub use dense::{DenseMatrix, FactorMatrices};
pub use kernels::{gram, hadamard_accumulate, solve_normal};
pub use tns::{load_tns, write_tns};
