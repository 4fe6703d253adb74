pub mod bench;
pub mod camera;
pub mod checks;
pub mod checkpoint;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gaussian;
pub mod loss;
pub mod mvdfa;
pub mod nn;
pub mod ply;
pub mod sesa;
pub mod renderer;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
