//! Dense linear-algebra kernels: matrices, seeded orthonormal bases,
//! Sherman–Morrison updates, Cholesky solves and a small Jacobi SVD.

mod linalg;
mod matrix;
mod rng;

pub use linalg::{
    cholesky, inverse_spd, random_orthonormal_rows, sherman_morrison_rank1, solve_spd, thin_svd,
    ThinSvd, SYMMETRY_TOL,
};
pub(crate) use matrix::parse_csv_row;
pub use matrix::{dot, norm2, Matrix};
pub use rng::{RngSeed, SeededRng};
