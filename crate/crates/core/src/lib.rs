//! Predicate-hierarchy state classification.
//!
//! The crate learns a joint image-predicate embedding on the Poincaré ball:
//! an object-conditioned scene encoder feeds a small hyperbolic network whose
//! representations are shaped by a triplet loss (predicate similarity) and a
//! norm regulariser (predicate specificity), both supervised by a relation
//! oracle. Synthetic grid-world scenes supply labelled data for in- and
//! out-of-distribution states.

pub mod encoder;
pub mod hypnet;
pub mod losses;
pub mod numcore;
pub mod oracle;
pub mod par;
pub mod poincare;
pub mod scenes;
pub mod trainer;

pub use numcore::{ParamStore, Tensor, TensorError};
pub use par::Exec;
pub use poincare::{BallPoint, TangentVector};
