pub mod cli;
pub mod config;
pub mod data;
pub mod envs;
pub mod eval;
pub mod error;
pub mod infer;
pub mod init;
pub mod numerics;
pub mod parallel;
pub mod policy;
pub mod train;
pub mod ssm;

mod binio;

pub use error::{Error, Result};
