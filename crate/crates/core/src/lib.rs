//! Core library of the annotation loop: domain model, storage, plugin host,
//! builtin stages, loop engine and crowd coordination.

pub mod app;
pub mod barcode;
pub mod clock;
pub mod coordination;
pub mod engine;
pub mod error;
pub mod imaging;
pub mod model;
pub mod plugin;
pub mod sim;
pub mod stages;
pub mod storage;

pub use error::{Error, Result};
