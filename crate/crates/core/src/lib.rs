#![no_std]
extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod analysis;
pub mod batch;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod objective;
pub mod optim;
pub mod record;
pub mod rng;
pub mod router;
pub mod tokenizer;

pub use error::{Error, Result};
