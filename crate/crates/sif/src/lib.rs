//! Sample-level tokenization and factored-attention ranking.
//!
//! The pipeline: a feature schema partitions multi-field samples into
//! sub-token slots; a residual-quantizing tokenizer compresses each sample
//! into discrete codebook indices; a row/column-factored attention backbone
//! ranks a target request against the user's tokenized history; training
//! runs the joint objective end-to-end with exact reverse-mode gradients.

pub mod ckpt;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod graph;
pub mod mixer;
pub mod model;
pub mod schema;
pub mod tensor;
pub mod tokenizer;
pub mod tokenstore;
pub mod training;

pub use error::{Result, SifError};

// training allocates and frees large intermediates every step; the default
// allocator's page churn dominates profiles without this
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;
