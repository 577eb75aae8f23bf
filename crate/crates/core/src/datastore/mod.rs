//! Persistence: response cache, dataset loaders, trace files and the
//! scripted fixture corpus.

pub mod cache;
pub mod corpus;
pub mod datasets;
pub mod traces;
