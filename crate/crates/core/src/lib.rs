//! 3D volume toolkit for one-shot atlas segmentation with mirror-consistency
//! registration error perception and confidence-weighted Fourier style
//! transfer.
//!
//! Layout is x-fastest: voxel `(x, y, z)` lives at `x + nx * (y + ny * z)`.
//! Displacements are in voxel units and warping pulls back,
//! `out(x) = in(x + phi(x))`.

pub mod config;
pub mod error;
pub mod filter;
pub mod io;
pub mod metrics;
pub mod objectives;
pub mod optim;
pub mod perception;
pub mod phantom;
pub mod pipeline;
pub mod registration;
pub mod segmenter;
pub mod style;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Dims, DisplacementField, LabelVolume, Mirror, ProbVolume, Spacing, Volume};
