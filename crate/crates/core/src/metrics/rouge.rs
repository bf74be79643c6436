//! ROUGE-1/2/L over token sequences: clipped n-gram overlap and
//! summary-level longest common subsequence, reported as precision, recall
//! and F1. Text inputs are lowercased and split on whitespace; no stemming.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// From an overlap count and the candidate/reference totals. Empty
    /// denominators give 0.
    pub fn from_counts(overlap: usize, candidate: usize, reference: usize) -> Self {
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let precision = ratio(overlap, candidate);
        let recall = ratio(overlap, reference);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { precision, recall, f1 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub r1: Prf,
    pub r2: Prf,
    pub rl: Prf,
    /// Set when the reference had no tokens; every component is then 0.
    pub empty_reference: bool,
}

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap, candidate n-gram total, reference n-gram total.
pub fn ngram_overlap<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> (usize, usize, usize) {
    let c = ngram_counts(candidate, n);
    let r = ngram_counts(reference, n);
    let overlap = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    let total = |s: &[T]| (s.len() + 1).saturating_sub(n);
    (overlap, total(candidate), total(reference))
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> RougeScore {
    if reference.is_empty() {
        return RougeScore {
            empty_reference: true,
            ..Default::default()
        };
    }
    let (o1, c1, r1) = ngram_overlap(candidate, reference, 1);
    let (o2, c2, r2) = ngram_overlap(candidate, reference, 2);
    RougeScore {
        r1: Prf::from_counts(o1, c1, r1),
        r2: Prf::from_counts(o2, c2, r2),
        rl: Prf::from_counts(lcs_len(candidate, reference), candidate.len(), reference.len()),
        empty_reference: false,
    }
}

/// ROUGE on raw text: lowercase, whitespace tokens.
pub fn rouge_text(candidate: &str, reference: &str) -> RougeScore {
    let c = crate::corpus::tokenize(candidate);
    let r = crate::corpus::tokenize(reference);
    rouge(&c, &r)
}

/// Component-wise mean of several scores; empty-reference entries count as
/// zeros.
pub fn mean_scores(scores: &[RougeScore]) -> RougeScore {
    if scores.is_empty() {
        return RougeScore::default();
    }
    let n = scores.len() as f64;
    let avg = |f: &dyn Fn(&RougeScore) -> Prf| {
        let mut out = Prf::default();
        for s in scores {
            let p = f(s);
            out.precision += p.precision / n;
            out.recall += p.recall / n;
            out.f1 += p.f1 / n;
        }
        out
    };
    RougeScore {
        r1: avg(&|s| s.r1),
        r2: avg(&|s| s.r2),
        rl: avg(&|s| s.rl),
        empty_reference: scores.iter().any(|s| s.empty_reference),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn hand_counted_example() {
        let s = rouge(&toks("a b c"), &toks("a b d"));
        assert!((s.r1.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.r1.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.r1.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.r2.f1 - 0.5).abs() < 1e-15);
        assert!((s.rl.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn clipping() {
        let s = rouge(&toks("a a a"), &toks("a"));
        assert!((s.r1.precision - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.r1.recall, 1.0);
        assert!((s.r1.f1 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn identity_and_empty() {
        let s = rouge(&toks("x y z w"), &toks("x y z w"));
        assert_eq!((s.r1.f1, s.r2.f1, s.rl.f1), (1.0, 1.0, 1.0));
        let e = rouge(&toks("x"), &[]);
        assert!(e.empty_reference);
        assert_eq!(e.r1.f1, 0.0);
        let c = rouge::<&str>(&[], &toks("x"));
        assert_eq!(c.r1, Prf::default());
    }

    #[test]
    fn text_is_lowercased() {
        let s = rouge_text("The  CAT", "the cat");
        assert_eq!(s.r1.f1, 1.0);
    }

    #[test]
    fn lcs_known_values() {
        assert_eq!(lcs_len(&toks("a b c b d a b"), &toks("b d c a b a")), 4);
        assert_eq!(lcs_len::<u8>(&[], &[1, 2]), 0);
    }
}
