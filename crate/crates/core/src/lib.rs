pub mod backbone;
pub mod checkpoint;
pub mod codec;
pub mod data;
pub mod error;
pub mod flow;
pub mod grid;
pub mod metrics;
pub mod motion;
pub mod nn;
pub mod phantom;
pub mod sampler;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use grid::{ImageGrid, LatentGrid, PixelRange};
