pub mod assignment;
pub mod correspondence;
pub mod embed;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod harness;
pub mod head;
pub mod losses;
pub mod model;
pub mod numkit;
pub mod par;
pub mod tracker;

pub use error::{Error, Result};
