pub mod delayed;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod graph;
pub mod imu;
pub mod inertial;
pub mod io;
pub mod lie;
pub mod marginalization;
pub mod pipeline;
pub mod sim;

pub use error::{Error, Result};

pub use nalgebra;
