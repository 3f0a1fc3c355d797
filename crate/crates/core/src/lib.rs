//! Flow-matching deformable registration of cardiac cine MRI in
//! displacement-field space.

pub mod config;
pub mod error;
pub mod flow;
pub mod fvol;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod synth;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Class, Dims, DisplacementField, LabelMap, Spacing, Volume};
