#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN
pub mod audiofeat;
pub mod checkpoint;
pub mod config;
pub mod dcca;
pub mod error;
pub mod features;
pub mod ingest;
pub mod nnet;
pub mod pipeline;
pub mod posefeat;
pub mod report;
pub mod retrieval;
pub mod synth;

pub use error::{Error, Result};
