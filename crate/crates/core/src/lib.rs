pub mod autodiff;
pub mod cli;
pub mod error;
pub mod geom;
pub mod imaging;
pub mod io;
pub mod optics;
pub mod optimize;
pub mod psf;
pub mod raytrace;
pub mod tasknet;

pub use error::{Error, Result};
