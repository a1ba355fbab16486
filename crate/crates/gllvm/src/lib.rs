//! File formats, replicate studies and the command-line front end for
//! `eva-gllvm-core`.

pub mod cli;
pub mod io;
pub mod manifest;
pub mod study;

use std::time::Instant;

use eva_gllvm_core::Clock;

pub use study::{run_study, StudyConfig, StudyReport};

/// Wall clock measured from construction.
#[derive(Clone, Copy, Debug)]
pub struct StdClock(Instant);

impl StdClock {
    pub fn new() -> Self {
        StdClock(Instant::now())
    }
}

impl Default for StdClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for StdClock {
    fn now(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
