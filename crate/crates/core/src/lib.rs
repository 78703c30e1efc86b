//! Reflected backward equations and nonlinear optimal stopping on finite
//! two-phase filtration trees.
//!
//! Every stage `k` reveals a Brownian increment (atoms of `G_k = F_{t_k-}`,
//! the pre-nodes) and then a mark (atoms of `F_k`, the post-nodes). Processes
//! live on the doubled instants `k-` and `k`, so stopping "just before" a grid
//! time is an ordinary decision.

pub mod audit;
pub mod bsde;
pub mod driver;
pub mod error;
pub mod filtration;
pub mod fixtures;
pub mod instance;
pub mod io;
pub mod oracle;
pub mod process;
pub mod rbsde;
pub mod snell;
pub mod stopping;

pub use error::{Error, Result};
