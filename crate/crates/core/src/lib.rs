pub mod autodiff;
pub mod catalog;
pub mod error;
pub mod infer_store;
pub mod eval;
pub mod ingest;
pub mod kv;
pub mod model;
pub mod record;
pub mod seed;
pub mod synthgen;
pub mod train;

pub use error::{Error, Result};
