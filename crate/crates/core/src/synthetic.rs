//! Desk-scale classification tasks whose labels are exactly computable
//! from the text.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Example, LabelMap, TaskData};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Rule {
    /// Label 1 iff the text holds more positive than negative keywords.
    KeywordMajority,
    /// Label 1 iff text_a and text_b share at least `k` distinct tokens.
    PairOverlap { k: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_train: usize,
    pub n_dev: usize,
    pub vocab_content_size: usize,
    /// Words per text (per side for pair tasks).
    pub seq_len: usize,
    pub rule: Rule,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_train: 512,
            n_dev: 256,
            vocab_content_size: 32,
            seq_len: 10,
            rule: Rule::KeywordMajority,
        }
    }
}

impl SyntheticSpec {
    /// Encoded length that fits every generated example untruncated.
    pub fn encoded_len(&self) -> usize {
        match self.rule {
            Rule::KeywordMajority => self.seq_len + 2,
            Rule::PairOverlap { .. } => 2 * self.seq_len + 3,
        }
    }
}

pub fn word(i: usize) -> String {
    format!("w{i:02}")
}

/// Keyword sets for keyword-majority: the first quarter of the content
/// words are positive, the second quarter negative.
pub fn keyword_sets(vocab_content_size: usize) -> (Vec<String>, Vec<String>) {
    let q = vocab_content_size / 4;
    ((0..q).map(word).collect(), (q..2 * q).map(word).collect())
}

impl Rule {
    pub fn name(&self) -> &'static str {
        match self {
            Rule::KeywordMajority => "keyword-majority",
            Rule::PairOverlap { .. } => "pair-overlap",
        }
    }

    /// The labelling function. `None` when the text is a keyword tie.
    pub fn label(&self, example: &Example, vocab_content_size: usize) -> Option<usize> {
        match *self {
            Rule::KeywordMajority => {
                let (pos, neg) = keyword_sets(vocab_content_size);
                let mut score = 0i64;
                for t in example.text_a.split_whitespace() {
                    if pos.iter().any(|p| p == t) {
                        score += 1;
                    } else if neg.iter().any(|n| n == t) {
                        score -= 1;
                    }
                }
                match score.signum() {
                    1 => Some(1),
                    -1 => Some(0),
                    _ => None,
                }
            }
            Rule::PairOverlap { k } => {
                let a: HashSet<&str> = example.text_a.split_whitespace().collect();
                let b: HashSet<&str> = example
                    .text_b
                    .as_deref()
                    .unwrap_or("")
                    .split_whitespace()
                    .collect();
                Some(usize::from(a.intersection(&b).count() >= k))
            }
        }
    }
}

pub fn make_synthetic_task(spec: &SyntheticSpec, seed: u64) -> Result<TaskData> {
    if spec.seq_len < 2 {
        return Err(Error::InvalidArgument(format!(
            "seq_len must be >= 2, got {}",
            spec.seq_len
        )));
    }
    if spec.n_train == 0 || spec.n_dev == 0 {
        return Err(Error::InvalidArgument(
            "n_train and n_dev must be positive".into(),
        ));
    }
    match spec.rule {
        Rule::KeywordMajority if spec.vocab_content_size < 6 => {
            return Err(Error::InvalidArgument(
                "keyword-majority needs vocab_content_size >= 6".into(),
            ))
        }
        Rule::PairOverlap { k } if k == 0 || k > spec.seq_len => {
            return Err(Error::InvalidArgument(format!(
                "pair-overlap needs 1 <= k <= seq_len, got k={k}"
            )))
        }
        Rule::PairOverlap { .. } if spec.vocab_content_size < 2 * spec.seq_len => {
            return Err(Error::InvalidArgument(
                "pair-overlap needs vocab_content_size >= 2 * seq_len".into(),
            ))
        }
        _ => {}
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = LabelMap {
        names: vec!["0".into(), "1".into()],
    };
    let mut split = |name: &str, n: usize| {
        let mut ys: Vec<usize> = (0..n).map(|i| i % 2).collect();
        ys.shuffle(&mut rng);
        let examples = ys
            .into_iter()
            .map(|y| generate(spec, y, &mut rng))
            .collect();
        Dataset::new(name, examples, labels.clone(), "accuracy")
    };
    let train = split("train", spec.n_train)?;
    let dev = split("dev", spec.n_dev)?;
    Ok(TaskData {
        name: spec.rule.name().to_string(),
        train,
        dev,
    })
}

fn generate(spec: &SyntheticSpec, label: usize, rng: &mut ChaCha8Rng) -> Example {
    match spec.rule {
        Rule::KeywordMajority => {
            let (pos, neg) = keyword_sets(spec.vocab_content_size);
            let neutral: Vec<String> = (2 * pos.len()..spec.vocab_content_size).map(word).collect();
            let max_minority = (spec.seq_len - 1) / 2;
            let minority = rng.gen_range(0..=max_minority.min(2));
            let room = spec.seq_len - 2 * minority;
            let majority = minority + rng.gen_range(1..=room.min(2));
            let (maj_set, min_set) = if label == 1 {
                (&pos, &neg)
            } else {
                (&neg, &pos)
            };
            let mut words: Vec<&str> = Vec::with_capacity(spec.seq_len);
            words.extend((0..majority).map(|_| maj_set.choose(rng).unwrap().as_str()));
            words.extend((0..minority).map(|_| min_set.choose(rng).unwrap().as_str()));
            while words.len() < spec.seq_len {
                words.push(neutral.choose(rng).unwrap().as_str());
            }
            words.shuffle(rng);
            Example::single(&words.join(" "), label)
        }
        Rule::PairOverlap { k } => {
            let overlap = if label == 1 {
                rng.gen_range(k..=(k + 1).min(spec.seq_len))
            } else {
                rng.gen_range(0..k)
            };
            let mut pool: Vec<usize> = (0..spec.vocab_content_size).collect();
            pool.shuffle(rng);
            let a: Vec<usize> = pool[..spec.seq_len].to_vec();
            let fresh = &pool[spec.seq_len..];
            let mut b: Vec<usize> = a.choose_multiple(rng, overlap).copied().collect();
            b.extend(fresh.choose_multiple(rng, spec.seq_len - overlap).copied());
            b.shuffle(rng);
            let join = |ws: &[usize]| ws.iter().map(|&i| word(i)).collect::<Vec<_>>().join(" ");
            Example::pair(&join(&a), &join(&b), label)
        }
    }
}
