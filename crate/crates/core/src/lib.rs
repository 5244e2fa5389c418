pub mod encoder;
pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod features;
pub mod harness;
pub mod hiformer;
pub mod model;
pub mod nesting;
pub mod numerics;
pub mod params;
pub mod seeding;
pub mod training;

pub use error::{HhftError, Result};
pub use numerics::{Tape, Tensor, Var};
