pub mod autodiff;
pub mod camera;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod losses;
pub mod optim;
pub mod run;
pub mod softras;
pub mod synth;
pub mod texflow;
pub mod train;

pub use error::{Error, Result};
