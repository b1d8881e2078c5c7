//! Hyperparameter tuning for the weighted Graphical Lasso.
//!
//! The inner problem is solved by proximal gradient descent ([`glasso`]);
//! hypergradients of a hold-out criterion with respect to a scalar `λ` or a
//! weight matrix `Λ` come from implicit differentiation of the solver's
//! fixed point ([`implicit_diff`]) and drive a first-order outer loop
//! ([`bilevel`]).

// `!(x > t)` is used on purpose so that NaN fails the test.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bilevel;
pub mod cli;
pub mod data_gen;
pub mod error;
pub mod glasso;
pub mod implicit_diff;
pub mod io;
pub mod linalg;

pub use error::{Error, Result};
pub use glasso::{PrecisionEstimate, Regularization, SolverConfig};
pub use linalg::{SupportSet, SymmetricMatrix};
