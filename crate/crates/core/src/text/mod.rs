//! Clinical narrative construction, word-level tokenization and the compact
//! report encoder.

mod encoder;
mod narrative;
mod vocab;

pub use encoder::TextEncoder;
pub use narrative::{compose_narrative, join_clinical_terms, ClinicalFields, ClinicalReport, CLINICAL_TERMS};
pub use vocab::{split_words, tokenize, Vocabulary, CLS_ID, PAD_ID, UNK_ID};
