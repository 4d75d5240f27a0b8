pub mod attention;
pub mod binio;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod forward;
pub mod kv;
pub mod numerics;
pub mod objective;
pub mod optim;
pub mod params;
pub mod synthesis;
pub mod training;

pub use error::{Error, Result};
