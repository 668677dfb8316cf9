//! Triple-docid corpora, FM-index constrained hybrid decoding, and the
//! retrieval objectives used to train and evaluate it.

pub mod corpus;
pub mod decoder;
pub mod eval;
pub mod fmindex;
pub mod objectives;
pub mod scorer;
pub mod tokenizer;
