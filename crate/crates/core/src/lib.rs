pub mod checkpoint;
pub mod config;
pub mod coord;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod loss;
pub mod matching;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pyramid;
pub mod scalar;
pub mod select;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod timeline;
pub mod train;

pub use error::{Error, Result};
pub use model::{Detector, ModelConfig};

pub type Detector32 = Detector<f32>;
pub type Detector64 = Detector<f64>;
