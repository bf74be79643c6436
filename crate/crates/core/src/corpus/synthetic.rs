//! Deterministic rule-based summarization domains.
//!
//! Sources are uniform draws over a pool of plain word tokens. Each domain
//! derives its summary from the source by a fixed rule, so a correct model
//! can reach near-perfect overlap and differences between domains are crisp:
//!
//! | rule           | summary                                               |
//! |----------------|-------------------------------------------------------|
//! | `lead`         | first `m` source tokens                               |
//! | `tagged`       | style token, then the `k` tokens preceded by a marker |
//! | `tail_reverse` | style token, then the last `m` tokens reversed        |
//! | `tail`         | style token, then the last `m` tokens in order        |

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{frame, Caps, Example, Framed, Vocabulary, RESERVED};
use crate::error::{Error, Result};

pub const MARKER: &str = "<mark>";
pub const STYLE_TAGGED: &str = "<kw>";
pub const STYLE_TAIL_REVERSE: &str = "<rev>";
pub const STYLE_TAIL: &str = "<tail>";
const SPECIALS: [&str; 4] = [MARKER, STYLE_TAGGED, STYLE_TAIL_REVERSE, STYLE_TAIL];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum DomainRule {
    Lead { m: usize },
    Tagged { k: usize },
    TailReverse { m: usize },
    Tail { m: usize },
}

impl DomainRule {
    /// Source tokens the rule needs at minimum.
    fn min_source(&self) -> usize {
        match *self {
            DomainRule::Lead { m } | DomainRule::TailReverse { m } | DomainRule::Tail { m } => m,
            DomainRule::Tagged { k } => 2 * k,
        }
    }

    fn summary_len(&self) -> usize {
        match *self {
            DomainRule::Lead { m } => m,
            DomainRule::Tagged { k } => k + 1,
            DomainRule::TailReverse { m } | DomainRule::Tail { m } => m + 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DomainRule::Lead { .. } => "lead",
            DomainRule::Tagged { .. } => "tagged",
            DomainRule::TailReverse { .. } => "tail_reverse",
            DomainRule::Tail { .. } => "tail",
        }
    }
}

fn default_extra() -> Vec<DomainRule> {
    vec![DomainRule::Tail { m: 3 }]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_domains: usize,
    pub vocab_size: usize,
    /// Inclusive range of source lengths (before the appended EOS).
    pub src_len_min: usize,
    pub src_len_max: usize,
    pub examples_per_domain: usize,
    pub seed: u64,
    /// Rules for domains beyond the three fixed ones.
    #[serde(default = "default_extra")]
    pub extra_rules: Vec<DomainRule>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_domains: 3,
            vocab_size: 512,
            src_len_min: 10,
            src_len_max: 16,
            examples_per_domain: 2000,
            seed: 0,
            extra_rules: default_extra(),
        }
    }
}

impl SyntheticSpec {
    pub fn rules(&self) -> Vec<DomainRule> {
        let mut r = vec![
            DomainRule::Lead { m: 4 },
            DomainRule::Tagged { k: 3 },
            DomainRule::TailReverse { m: 6 },
        ];
        r.extend(self.extra_rules.iter().copied());
        r
    }

    pub fn rule(&self, domain: usize) -> Option<DomainRule> {
        self.rules().get(domain).copied()
    }

    fn pool_size(&self) -> usize {
        self.vocab_size.saturating_sub(RESERVED.len() + SPECIALS.len())
    }

    /// Word tokens sources are drawn from.
    pub fn pool(&self) -> Vec<String> {
        (0..self.pool_size()).map(|i| format!("w{i:03}")).collect()
    }

    /// Vocabulary covering every token the generator can emit.
    pub fn vocabulary(&self) -> Vocabulary {
        let mut inventory: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        inventory.extend(self.pool());
        Vocabulary::build(&inventory, self.vocab_size)
    }

    /// Caps that fit every generated example (source EOS and target BOS
    /// included).
    pub fn caps(&self) -> Caps {
        let longest = self.rules().iter().map(DomainRule::summary_len).max().unwrap_or(1);
        Caps {
            max_src_len: self.src_len_max + 1,
            max_tgt_len: longest + 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_domains == 0 || self.n_domains > self.rules().len() {
            return Err(Error::Config(format!(
                "n_domains must be in 1..={}, got {}",
                self.rules().len(),
                self.n_domains
            )));
        }
        if self.pool_size() < 8 {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room for word tokens after {} reserved and {} marker/style tokens",
                self.vocab_size,
                RESERVED.len(),
                SPECIALS.len()
            )));
        }
        if self.src_len_min > self.src_len_max {
            return Err(Error::Config("src_len_min exceeds src_len_max".into()));
        }
        for rule in self.rules().iter().take(self.n_domains) {
            if self.src_len_min < rule.min_source() {
                return Err(Error::Config(format!(
                    "rule {} needs sources of at least {} tokens",
                    rule.name(),
                    rule.min_source()
                )));
            }
        }
        Ok(())
    }
}

fn make_pair(rule: DomainRule, pool: &[String], len: usize, rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<String>) {
    let mut draw = |n: usize| -> Vec<String> { (0..n).map(|_| pool[rng.random_range(0..pool.len())].clone()).collect() };
    match rule {
        DomainRule::Lead { m } => {
            let src = draw(len);
            let sum = src[..m].to_vec();
            (src, sum)
        }
        DomainRule::Tagged { k } => {
            let base = draw(len - k);
            let mut picks = sample(rng, base.len(), k).into_vec();
            picks.sort_unstable();
            let mut src = Vec::with_capacity(len);
            let mut sum = vec![STYLE_TAGGED.to_string()];
            for (i, tok) in base.into_iter().enumerate() {
                if picks.contains(&i) {
                    src.push(MARKER.to_string());
                    sum.push(tok.clone());
                }
                src.push(tok);
            }
            (src, sum)
        }
        DomainRule::TailReverse { m } => {
            let src = draw(len);
            let mut sum = vec![STYLE_TAIL_REVERSE.to_string()];
            sum.extend(src[len - m..].iter().rev().cloned());
            (src, sum)
        }
        DomainRule::Tail { m } => {
            let src = draw(len);
            let mut sum = vec![STYLE_TAIL.to_string()];
            sum.extend(src[len - m..].iter().cloned());
            (src, sum)
        }
    }
}

/// Generates `examples_per_domain` examples for each of the first
/// `n_domains` rules. Each domain draws from its own seeded stream, so a
/// domain's examples do not depend on how many domains are requested.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<(usize, Vec<Example>)>> {
    spec.validate()?;
    let vocab = spec.vocabulary();
    let pool = spec.pool();
    let caps = spec.caps();
    let mut out = Vec::with_capacity(spec.n_domains);
    for (domain, rule) in spec.rules().into_iter().enumerate().take(spec.n_domains) {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(domain as u64 + 1);
        let mut examples = Vec::with_capacity(spec.examples_per_domain);
        for _ in 0..spec.examples_per_domain {
            let len = rng.random_range(spec.src_len_min..=spec.src_len_max);
            let (src, sum) = make_pair(rule, &pool, len, &mut rng);
            match frame(&vocab, &src.join(" "), &sum.join(" "), domain, caps) {
                Framed::Ok { example, .. } => examples.push(example),
                Framed::TargetTooLong => unreachable!("caps are derived from the rules"),
            }
        }
        out.push((domain, examples));
    }
    Ok(out)
}

/// Re-derives the summary from the source by reading the rule backwards and
/// compares. Independent of the generator's construction.
pub fn verify_rule(rule: DomainRule, source: &[&str], summary: &[&str]) -> bool {
    match rule {
        DomainRule::Lead { m } => source.len() >= m && summary == &source[..m],
        DomainRule::Tagged { k } => {
            let Some((style, rest)) = summary.split_first() else { return false };
            let marked: Vec<&str> = source
                .windows(2)
                .filter(|w| w[0] == MARKER)
                .map(|w| w[1])
                .collect();
            *style == STYLE_TAGGED && marked.len() == k && rest == marked.as_slice()
        }
        DomainRule::TailReverse { m } => {
            let Some((style, rest)) = summary.split_first() else { return false };
            let mut tail: Vec<&str> = source.iter().rev().take(m).copied().collect();
            if tail.len() != m {
                return false;
            }
            *style == STYLE_TAIL_REVERSE && rest == tail.as_slice() && {
                tail.reverse();
                tail.as_slice() == &source[source.len() - m..]
            }
        }
        DomainRule::Tail { m } => {
            let Some((style, rest)) = summary.split_first() else { return false };
            source.len() >= m && *style == STYLE_TAIL && rest == &source[source.len() - m..]
        }
    }
}
