//! Classical single-view registration baselines.
//!
//! Both baselines see SAX volumes only; multi-view information is the
//! tracker's edge, and keeping the baselines single-view preserves that
//! comparison structure.

pub mod demons;
pub mod ffd;

pub use demons::{register_demons, DemonsConfig};
pub use ffd::{register_ffd, FfdConfig};
