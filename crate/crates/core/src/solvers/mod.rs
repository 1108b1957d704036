//! Dense linear-algebra kernels used by the fusion engine.

mod lbfgs;
mod least_squares;
mod matrix;

pub use lbfgs::{lbfgs_minimize, LbfgsConfig, LbfgsOutcome, Termination};
pub use least_squares::{
    condition_number, gram_factor, numerical_rank, pseudoinverse, singular_values, solve_min_norm_factored,
    solve_min_norm_ls, QuadraticObjective, DEFAULT_PINV_TOL,
};
pub use matrix::DenseMatrix;
