pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod conditioning;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod phantom;
pub mod report;
pub mod split;
pub mod train;
pub mod volume;

pub use error::{Error, ErrorCategory, Result};
pub use volume::{NormalizationStats, PairedSample, Range, Volume};
