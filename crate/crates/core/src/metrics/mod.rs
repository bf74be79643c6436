//! Summary quality metrics.

mod rouge;

pub use rouge::{lcs_len, mean_scores, ngram_overlap, rouge, rouge_text, Prf, RougeScore};
