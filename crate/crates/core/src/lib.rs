//! Conversion of exoskeleton RGB-D demonstrations into robot-domain
//! demonstrations.

pub mod adaptors;
pub mod aligner;
pub mod calibration;
pub mod error;
pub mod evalstats;
pub mod geometry;
pub mod io;
pub mod kinematics;
pub mod optim;
pub mod pipeline;
pub mod raster;
pub mod recording;
pub mod synth;
pub mod trajectory;

pub use error::{Error, Result};
