pub mod attacks;
pub mod augment;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod losses;
pub mod models;
pub mod numerics;
pub mod seed;
pub mod selfcheck;
pub mod training;

pub use error::{Error, Result};

/// Double-precision matrix.
pub type Matrix64 = numerics::Matrix<f64>;
pub type Matrix32 = numerics::Matrix<f32>;
/// Double-precision gradient tape.
pub type Tape64 = numerics::Tape<f64>;
pub type Tape32 = numerics::Tape<f32>;
