//! Multiple-set linear canonical analysis and the test of mutual
//! non-correlation between sets of random vectors.

pub mod asymptotics;
pub mod block;
pub mod error;
pub mod estimation;
pub mod noncorr;
pub mod population;
pub mod simulate;

pub use block::{BlockMatrix, BlockStructure, BlockVector};
pub use error::{MslcaError, Result};
pub use estimation::{fit_mslca, Dataset, MslcaFit};
pub use noncorr::{test_chi2, test_general, TestReport};
pub use population::{solve_mslca, CovarianceModel, MslcaSolution};
