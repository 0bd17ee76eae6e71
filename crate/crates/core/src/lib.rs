//! Joint-attention representation learning for paired first-person and
//! third-person video.

pub mod apps;
pub mod datakit;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod trainer;

pub use error::{Error, Result};
