//! Blocked linearized coordinate (BLCO) sparse tensors and the MTTKRP and
//! CP-ALS kernels built on them.
//!
//! [`format::build_blco`] turns a [`SparseTensorCoo`] into a
//! [`format::BlcoTensor`]; [`mttkrp::mttkrp`] runs the blocked kernel on a
//! simulated work-group machine ([`exec`]); [`stream::stream_mttkrp`] does the
//! same under a device memory budget; [`cpals::cp_als`] drives the full
//! decomposition. [`oracle`] holds the sequential references.

pub mod cli;
pub mod cpals;
pub mod error;
pub mod exec;
pub mod fixtures;
pub mod format;
pub mod linearize;
pub mod mttkrp;
pub mod oracle;
pub mod par;
pub mod stream;
pub mod tensor;

pub use error::{Error, Result};
pub use exec::{ConflictResolution, ExecConfig};
pub use format::{build_blco, BlcoTensor};
pub use linearize::BitLayout;
pub use tensor::{DenseMatrix, FactorMatrices, SparseTensorCoo};
