pub mod criteria;
pub mod dgp;
pub mod dists;
pub mod em;
pub mod error;
pub mod forecast;
pub mod gof;
pub mod markov;
pub mod mc;
pub mod rng;

pub use error::{Error, Result};
