//! Joint passage ranking and supporting-fact selection with a shared
//! transformer encoder and two scoring heads.

mod error;

pub mod config;
pub mod corpus;
pub mod encoder;
pub mod encoding;
pub mod evaluation;
pub mod heads;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
