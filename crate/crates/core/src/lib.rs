pub mod analysis;
pub mod augment;
pub mod config;
pub mod bbox;
pub mod data;
pub mod datasynth;
pub mod detector;
pub mod error;
pub mod eval;
pub mod fsio;
pub mod losses;
pub mod mkmmd;
pub mod train;
pub mod imgproc;
pub mod ndgrad;

pub use error::{Error, Result};
