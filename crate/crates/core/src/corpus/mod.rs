//! Tokenization, JSONL ingestion and the synthetic multi-domain corpus.

mod jsonl;
mod synthetic;
mod vocab;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BOS, EOS};

pub use jsonl::{load_jsonl, read_inputs, read_records, write_jsonl, LoadReport, Record};
pub use synthetic::{generate_synthetic, verify_rule, DomainRule, SyntheticSpec, MARKER, STYLE_TAGGED, STYLE_TAIL, STYLE_TAIL_REVERSE};
pub use vocab::{tokenize, Vocabulary, RESERVED};

/// A tokenized source/summary pair tagged with its dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    /// Source tokens followed by EOS.
    pub source_ids: Vec<usize>,
    /// `BOS summary… EOS`.
    pub target_ids: Vec<usize>,
    pub dataset_id: usize,
    pub raw_source: String,
    pub raw_summary: String,
}

impl Example {
    /// Number of predicted target tokens (everything after BOS).
    pub fn n_y(&self) -> usize {
        self.target_ids.len() - 1
    }

    /// Summary tokens without BOS/EOS.
    pub fn summary_ids(&self) -> &[usize] {
        &self.target_ids[1..self.target_ids.len() - 1]
    }
}

/// Length caps applied when turning text into examples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Caps {
    pub max_src_len: usize,
    pub max_tgt_len: usize,
}

pub(crate) enum Framed {
    Ok { example: Example, truncated: bool },
    TargetTooLong,
}

/// Source ids are truncated to leave room for EOS; targets that do not fit
/// (BOS plus summary must fit the decoder) are refused.
pub(crate) fn frame(vocab: &Vocabulary, source: &str, summary: &str, dataset_id: usize, caps: Caps) -> Framed {
    let mut src = vocab.encode(source);
    let truncated = src.len() + 1 > caps.max_src_len;
    src.truncate(caps.max_src_len.saturating_sub(1));
    src.push(EOS);
    let sum = vocab.encode(summary);
    if sum.len() + 1 > caps.max_tgt_len {
        return Framed::TargetTooLong;
    }
    let mut tgt = Vec::with_capacity(sum.len() + 2);
    tgt.push(BOS);
    tgt.extend(sum);
    tgt.push(EOS);
    Framed::Ok {
        example: Example {
            source_ids: src,
            target_ids: tgt,
            dataset_id,
            raw_source: source.to_string(),
            raw_summary: summary.to_string(),
        },
        truncated,
    }
}

/// Groups examples by dataset id, requiring the ids to cover `0..T`.
pub fn group_by_dataset(examples: Vec<Example>) -> Result<Vec<(usize, Vec<Example>)>> {
    let mut groups: BTreeMap<usize, Vec<Example>> = BTreeMap::new();
    for e in examples {
        groups.entry(e.dataset_id).or_default().push(e);
    }
    for (expect, &id) in groups.keys().enumerate() {
        if id != expect {
            return Err(Error::Input(format!(
                "dataset ids are not contiguous: {id} present but {expect} missing"
            )));
        }
    }
    Ok(groups.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn framing_truncates_source_and_refuses_long_targets() {
        let v = Vocabulary::build(&["a b c d e f"], 100);
        let caps = Caps {
            max_src_len: 4,
            max_tgt_len: 3,
        };
        match frame(&v, "a b c d e", "a b", 0, caps) {
            Framed::Ok { example, truncated } => {
                assert!(truncated);
                assert_eq!(example.source_ids.len(), 4);
                assert_eq!(*example.source_ids.last().unwrap(), EOS);
                assert_eq!(example.target_ids.len(), 4);
                assert_eq!(example.n_y(), 3);
            }
            Framed::TargetTooLong => panic!("target fits"),
        }
        assert!(matches!(frame(&v, "a", "a b c", 0, caps), Framed::TargetTooLong));
    }

    #[test]
    fn grouping_requires_contiguous_ids() {
        let v = Vocabulary::build(&["a"], 10);
        let caps = Caps {
            max_src_len: 8,
            max_tgt_len: 8,
        };
        let mk = |id| match frame(&v, "a", "a", id, caps) {
            Framed::Ok { example, .. } => example,
            _ => unreachable!(),
        };
        let groups = group_by_dataset(vec![mk(1), mk(0), mk(1)]).unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[1].1.len(), 2);
        assert!(group_by_dataset(vec![mk(0), mk(2)]).is_err());
    }
}
