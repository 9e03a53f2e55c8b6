pub mod config;
pub mod control;
pub mod error;
pub mod fbm;
pub mod field;
pub mod holder;
pub mod io;
pub mod kernel;
pub mod ldp;
pub mod noise;
pub mod nonlinearity;
pub mod oracles;
pub mod parallel;
pub mod path;
pub mod quad;
pub mod rng;
pub mod runner;
pub mod solver;
pub mod stats;

pub use error::{Error, Result};
