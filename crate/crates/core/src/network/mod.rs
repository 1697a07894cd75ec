//! Network definition, parameter/MAC accounting and checkpoints.

mod accounting;
mod checkpoint;
mod model;
mod spec;

pub use accounting::*;
pub use checkpoint::*;
pub use model::*;
pub use spec::*;
