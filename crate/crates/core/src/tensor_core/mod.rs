//! Shared numerical substrate: tensors, random streams, eigendecomposition,
//! special functions, Hadamard matrices and the OSTT file format.

mod eig;
mod gaussian;
mod linalg;
pub mod ostt;
mod rng;
mod special;
mod tensor;

pub use eig::{check_symmetric, eig_symmetric, EigenDecomposition};
pub use gaussian::gaussian_sample;
pub use linalg::{hadamard, hadamard_rows_in_place, orthonormalize, qr, solve};
pub use ostt::{read_tensor, write_tensor};
pub use rng::Rng;
pub use special::{chi2_cdf, chi2_quantile, gamma_p, ln_gamma};
pub use tensor::{dot, Tensor};
