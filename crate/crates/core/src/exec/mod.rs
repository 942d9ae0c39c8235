//! Plan execution, sentinel sampling and the optimizer driver.

pub mod engine;
pub mod optimizer;
pub mod sampling;

pub use engine::{converter_key, ConverterStore, Engine, RunInput, RunOutput};
pub use optimizer::{CandidateEstimate, Optimized, OptimizerConfig, RunReport, SamplingReport, Session};
pub use sampling::{SamplingOutcome, SentinelTotals};
