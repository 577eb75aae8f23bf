//! Interactive prompting for knowledge-based visual question answering.
//!
//! An episode detects objects and captions the image, then repeatedly
//! attends to one object, describes its region, asks a language model for
//! an answer with a rationale, and verifies the rationale against the
//! image, until two consecutive answers agree. Model services are reached
//! through [`backends::Transport`]s; every step is recorded in a
//! [`model::ReasoningTrace`].

pub mod backends;
pub mod cli;
pub mod datastore;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod pipeline;
pub mod prompting;

pub use error::{Error, Result};
