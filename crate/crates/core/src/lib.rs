//! Knowledge injection into a bi-modal (text + vision) transformer for
//! knowledge-based visual question answering.
//!
//! The crate is organized along the pipeline:
//!
//! - [`embeddings`]: embedding tables and the least-squares alignment map
//! - [`spans`]: entity-span construction and wiki link resolution
//! - [`injector`]: wordpiece tokenization with injected entity vectors
//! - [`model`]: a small trainable three-encoder co-attention transformer
//! - [`explain`]: gradient-weighted attention relevancy and perturbation tests
//! - [`harness`]: datasets, synthetic benchmark, metrics, reports

pub mod embeddings;
pub mod explain;
pub mod harness;
pub mod injector;
pub mod model;
pub mod spans;
