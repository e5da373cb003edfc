pub mod checkpoint;
pub mod classifier;
pub mod container;
pub mod error;
pub mod graph;
pub mod imageio;
pub mod injection;
pub mod metrics;
pub mod montage;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod scheduler;
pub mod synthdata;
pub mod tensor;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::Tensor;
