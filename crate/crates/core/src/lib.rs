pub mod cache;
pub mod cli;
pub mod cost;
pub mod datasource;
pub mod error;
pub mod exec;
pub mod fingerprint;
pub mod generators;
pub mod logical;
pub mod physical;
pub mod record;
pub mod schema;
pub mod trace;
pub mod udf;

pub use error::{Error, Result};
