//! Two-network multi-task learning with co-attentive feature sharing.
//!
//! The crate bundles a small reverse-mode tensor engine ([`tape`]), the
//! sharing units ([`sharing`]), a two-stream CNN ([`backbone`]), a synthetic
//! attribute dataset and loader ([`data`]), attribute-recognition metrics
//! ([`metrics`]), and the training and sweep machinery ([`train`], [`suite`]).

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod export;
pub mod gradcheck;
pub mod metrics;
pub mod par;
pub mod param;
pub mod pnm;
pub mod sharing;
pub mod suite;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use param::{Initializer, Param, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Shape, Tensor};
