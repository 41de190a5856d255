//! Self-distillation enhanced masked image modeling (SD-SimMIM) at desk
//! scale: a windowed transformer encoder is pretrained by reconstructing
//! masked patches while a shared projection head distills decoder features
//! of visible patches into the encoder features of the same patches.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod imaging;
pub mod losses;
pub mod model;
pub mod objective;
pub mod patching;
pub mod probe;
pub mod reconstruct;
pub mod seeding;
pub mod training;

pub use config::RunConfig;
pub use error::{Error, Result};
