//! Tokenization, domain corpora with audited split access, and synthetic
//! domain generation.

pub mod cache;
mod domain;
pub mod synthetic;
mod tokenizer;

pub use domain::{
    ingest_domain, read_text_dir, sample_windows, AccessRecord, DomainCorpus, DomainRole, Purpose, Split,
    SplitFractions,
};
pub use synthetic::{generate_synthetic_domain, js_divergence, Lexicon, SyntheticDomainSpec};
pub use tokenizer::{Tokenizer, BOS_ID, EOS_ID, PAD_ID};
