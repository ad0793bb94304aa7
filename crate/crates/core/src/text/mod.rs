//! Tokenization, corpus ingestion, batching and source masking.

pub mod batch;
pub mod bpe;
pub mod corpus;
pub mod vocab;

pub use batch::{make_batches, Batch};
pub use bpe::{train_bpe, Tokenizer};
pub use corpus::{mask_source, prefix_target_token, Corpus, CorpusManifest, ParallelExample};
pub use vocab::{Vocabulary, BOS, EOS, MASK, PAD, UNK};
