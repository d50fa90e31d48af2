pub mod conic;
pub mod economics;
pub mod error;
pub mod fairness;
pub mod hc;
pub mod io;
pub mod loadflow;
pub mod matrices;
pub mod network;
pub mod series;

pub use error::{Error, Result};
