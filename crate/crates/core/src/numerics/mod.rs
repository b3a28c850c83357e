//! Numerically hardened primitives shared by the model code.
//!
//! Everything here is a pure function of its inputs. The Hermitian
//! positive-definite type is the only place covariance matrices are
//! factorized; the special functions evaluate the von-Mises-Fisher
//! normalizer in the log domain so that high concentrations in high
//! dimension do not overflow.

mod assignment;
mod hermitian;
mod special;

pub use assignment::linear_sum_assignment;
pub use hermitian::{
    cholesky_logdet_solve, diagonal_load, Cholesky, HermitianPD, DEFAULT_LOADING, MAX_LOADING,
};
pub use special::{
    ln_bessel_i, ln_gamma, log_vmf_normalizer, logsumexp, mean_resultant_length,
};

pub(crate) use special::logsumexp_unchecked;
