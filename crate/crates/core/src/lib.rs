//! Pool-based batch active learning that trades off informativeness against
//! in-distribution confidence when the unlabeled pool contains
//! out-of-distribution samples.

pub mod acquisition;
pub mod data;
pub mod error;
pub mod idscore;
pub mod learner;
pub mod pareto;
pub mod harness;
pub mod strategies;

pub use error::{Error, Result};
