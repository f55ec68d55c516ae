#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod datapipe;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod losses;
pub mod networks;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod toyset;

pub use error::{Error, Result};
