//! Load-time control layer for a deterministic toy transformer: importance
//! profiling, precision routing, deployment-mode planning, reference
//! quantization, tiered weight paging, and the top-k recovery bound.

pub mod canon;
pub mod dispatch;
pub mod error;
pub mod model;
pub mod pager;
pub mod profiler;
pub mod quant;
pub mod recovery;
pub mod rng;

pub use error::{NveError, Result};
