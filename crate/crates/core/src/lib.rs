//! Coefficients of determination for random-intercept linear and generalized
//! linear mixed models.
//!
//! The explained share of variation is split into a fixed-effects part
//! (`R_F²`), a whole-model part (`R_M²`) and their difference (`R_R²`). For
//! linear mixed models the unexplained variation of each observation is its
//! expected squared residual with the random intercept integrated over its
//! conditional distribution. For generalized models squared distances are
//! replaced by the squared arc length along the variance function.

pub mod cli;
pub mod design;
pub mod error;
pub mod glm;
pub mod glmm;
pub mod lmm;
pub mod optim;
pub mod quadrature;
pub mod report;
pub mod sim;
pub mod stats;
pub mod varfun;

pub use error::{Error, Result};
