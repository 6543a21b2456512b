#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod afem;
pub mod error;
pub mod estimator;
pub mod experiments;
pub mod isotropic;
pub mod linalg;
pub mod mesh;
pub mod quadrature;
pub mod system;
pub mod weighted;

#[cfg(test)]
#[path = "../tests/common/oracle.rs"]
#[allow(dead_code)]
mod oracle;

pub use error::{Error, Result};
