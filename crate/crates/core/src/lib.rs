pub mod baselines;
pub mod cli;
pub mod coagent;
pub mod cohort;
pub mod error;
pub mod eval;
pub mod io;
pub mod llm;
pub mod model;
pub mod narrative;
pub mod prompt;
pub mod rundir;
pub mod synth;
pub mod util;

pub use error::{Error, Result};
