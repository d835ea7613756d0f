pub mod autograd;
pub mod backbone;
pub mod boxes;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod jtmg;
pub mod losses;
pub mod model;
pub mod mtbr;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod tg_rpn;
pub mod train;

pub use error::{Error, Result};
