//! Dense matrices, SPD linear algebra and a reverse-mode tape, generic over [`Scalar`].

mod linalg;
mod matrix;
mod scalar;
mod tape;

pub use linalg::{
    cholesky_spd, inverse_from_cholesky, jacobi_eigenvalues, logdet_from_cholesky, logdet_spd,
    singular_values, spd_inverse, PIVOT_FLOOR, SYMMETRY_TOL,
};
pub use matrix::Matrix;
pub use scalar::Scalar;
pub use tape::{Gradients, MappedRow, RowMap, Tape, Var, NORM_FLOOR};
