pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dataset_io;
pub mod error;
pub mod masking;
pub mod nn;
pub mod seed;

pub use error::{Error, Result};
pub mod distill;
pub mod eval;
pub mod fewshot;
pub mod pipeline;
pub mod pretrain;
pub mod report;
