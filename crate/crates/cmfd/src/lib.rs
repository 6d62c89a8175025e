//! File formats, dataset generation, training, batch detection, evaluation
//! and rendering around [`cmfd_core`]. The `cmfd` binary exposes these as
//! the `generate`, `train`, `detect`, `evaluate` and `render` commands.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod detect;
pub mod error;
pub mod evaluate;
pub mod io;
pub mod plugins;
pub mod render;
pub mod train;

pub use error::{Error, Result};
