pub mod autograd;
pub mod backbone;
pub mod bbox;
pub mod checkpoint;
pub mod config;
pub mod crm;
pub mod emoe;
pub mod error;
pub mod eventrep;
pub mod model;
pub mod objective;
pub mod params;
pub mod raster;
pub mod tensor;
pub mod trackloop;
pub mod viz;

pub use error::{Error, Result};
pub use model::Tracker;
pub use tensor::Matrix;
