//! Data model and ingestion: sentence instances with one
//! `<head, relation, tail>` triple each, relation-grouped corpora,
//! tag-sequence construction, relation-disjoint splitting, and a
//! synthetic corpus generator.

mod canonical;
mod fewrel;
mod synth;
mod tags;

pub use canonical::{
    corpora_from_records, corpora_to_records, parse_canonical, read_canonical, write_canonical,
    CanonicalRecord,
};
pub use fewrel::{load_fewrel, parse_fewrel};
pub use synth::{generate_synthetic, SynthConfig};
pub use tags::{
    spans_from_labels, to_tag_sequence, validate_labels, SubtokenMap, Tag, TagSequence,
};

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::DataError;

/// Inclusive token index range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl From<(usize, usize)> for Span {
    fn from((start, end): (usize, usize)) -> Self {
        Span { start, end }
    }
}

impl From<Span> for (usize, usize) {
    fn from(s: Span) -> Self {
        (s.start, s.end)
    }
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i <= self.end
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

/// One tokenized sentence with its single annotated triple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceInstance {
    pub tokens: Vec<String>,
    pub head_span: Span,
    pub tail_span: Span,
    pub relation: String,
}

impl SentenceInstance {
    pub fn new(
        tokens: Vec<String>,
        head_span: Span,
        tail_span: Span,
        relation: String,
    ) -> Result<Self, DataError> {
        let inst = SentenceInstance {
            tokens,
            head_span,
            tail_span,
            relation,
        };
        inst.validate("instance")?;
        Ok(inst)
    }

    pub fn validate(&self, locator: &str) -> Result<(), DataError> {
        let n = self.tokens.len();
        for (role, span) in [("head", self.head_span), ("tail", self.tail_span)] {
            if span.start > span.end {
                return Err(DataError::validation(
                    locator,
                    format!("{role} span {span:?} is reversed"),
                ));
            }
            if span.end >= n {
                return Err(DataError::validation(
                    locator,
                    format!("{role} span {span:?} exceeds the {n} tokens"),
                ));
            }
        }
        if self.head_span.overlaps(&self.tail_span) {
            return Err(DataError::validation(
                locator,
                format!(
                    "head {:?} overlaps tail {:?}",
                    self.head_span, self.tail_span
                ),
            ));
        }
        if self.relation.is_empty() {
            return Err(DataError::validation(locator, "empty relation label"));
        }
        Ok(())
    }
}

/// Which dataset a corpus (or record) belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Valid,
    Test,
}

impl SplitTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Valid => "valid",
            SplitTag::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self, DataError> {
        match s {
            "train" => Ok(SplitTag::Train),
            "valid" => Ok(SplitTag::Valid),
            "test" => Ok(SplitTag::Test),
            other => Err(DataError::Invalid(format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Instances grouped by relation label. Immutable after construction;
/// every relation group is non-empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    split: SplitTag,
    groups: BTreeMap<String, Vec<SentenceInstance>>,
}

impl Corpus {
    pub fn new(
        split: SplitTag,
        instances: impl IntoIterator<Item = SentenceInstance>,
    ) -> Result<Self, DataError> {
        let mut groups: BTreeMap<String, Vec<SentenceInstance>> = BTreeMap::new();
        for inst in instances {
            groups.entry(inst.relation.clone()).or_default().push(inst);
        }
        if groups.is_empty() {
            return Err(DataError::Invalid("corpus has no instances".into()));
        }
        Ok(Corpus { split, groups })
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    /// Relation labels in sorted order.
    pub fn relations(&self) -> Vec<&str> {
        self.groups.keys().map(String::as_str).collect()
    }

    pub fn n_relations(&self) -> usize {
        self.groups.len()
    }

    pub fn group(&self, relation: &str) -> Option<&[SentenceInstance]> {
        self.groups.get(relation).map(Vec::as_slice)
    }

    pub fn n_instances(&self) -> usize {
        self.groups.values().map(Vec::len).sum()
    }

    pub fn instances(&self) -> impl Iterator<Item = &SentenceInstance> {
        self.groups.values().flatten()
    }
}

/// True when the relation label sets of all corpora are pairwise disjoint.
pub fn splits_are_disjoint(corpora: &[&Corpus]) -> bool {
    let mut seen = std::collections::BTreeSet::new();
    for c in corpora {
        for r in c.groups.keys() {
            if !seen.insert(r.clone()) {
                return false;
            }
        }
    }
    true
}

/// Partition a corpus into relation-disjoint train/valid/test corpora of
/// the requested relation counts. Deterministic under `seed`.
pub fn split_relations(
    corpus: &Corpus,
    n_train: usize,
    n_valid: usize,
    n_test: usize,
    seed: u64,
) -> Result<(Corpus, Corpus, Corpus), DataError> {
    let total = n_train + n_valid + n_test;
    let mut relations: Vec<String> = corpus.groups.keys().cloned().collect();
    if total > relations.len() {
        return Err(DataError::Invalid(format!(
            "requested {total} relations, corpus has {}",
            relations.len()
        )));
    }
    if n_train == 0 || n_valid == 0 || n_test == 0 {
        return Err(DataError::Invalid(
            "every split needs at least one relation".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    relations.shuffle(&mut rng);

    let build = |names: &[String], tag: SplitTag| -> Result<Corpus, DataError> {
        let instances = names
            .iter()
            .flat_map(|r| corpus.groups[r].iter().cloned())
            .collect::<Vec<_>>();
        Corpus::new(tag, instances)
    };
    let train = build(&relations[..n_train], SplitTag::Train)?;
    let valid = build(&relations[n_train..n_train + n_valid], SplitTag::Valid)?;
    let test = build(
        &relations[n_train + n_valid..n_train + n_valid + n_test],
        SplitTag::Test,
    )?;
    Ok((train, valid, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_instance(relation: &str, n: usize) -> SentenceInstance {
        SentenceInstance::new(
            (0..n.max(3)).map(|i| format!("w{i}")).collect(),
            Span::new(0, 0),
            Span::new(1, 1),
            relation.to_string(),
        )
        .unwrap()
    }

    fn corpus_with(relations: usize, per: usize) -> Corpus {
        let mut all = Vec::new();
        for r in 0..relations {
            for _ in 0..per {
                all.push(toy_instance(&format!("R{r:03}"), 4));
            }
        }
        Corpus::new(SplitTag::Train, all).unwrap()
    }

    #[test]
    fn split_counts_and_disjointness() {
        let c = corpus_with(80, 3);
        let (tr, va, te) = split_relations(&c, 50, 15, 15, 7).unwrap();
        assert_eq!(tr.n_relations(), 50);
        assert_eq!(va.n_relations(), 15);
        assert_eq!(te.n_relations(), 15);
        assert!(splits_are_disjoint(&[&tr, &va, &te]));
        let mut union: Vec<&str> = tr
            .relations()
            .into_iter()
            .chain(va.relations())
            .chain(te.relations())
            .collect();
        union.sort_unstable();
        assert_eq!(union, c.relations());
    }

    #[test]
    fn split_is_deterministic_under_seed() {
        let c = corpus_with(20, 2);
        let a = split_relations(&c, 10, 5, 5, 42).unwrap();
        let b = split_relations(&c, 10, 5, 5, 42).unwrap();
        assert_eq!(a.0.relations(), b.0.relations());
        assert_eq!(a.1.relations(), b.1.relations());
        assert_eq!(a.2.relations(), b.2.relations());
        let d = split_relations(&c, 10, 5, 5, 43).unwrap();
        assert!(a.0.relations() != d.0.relations() || a.1.relations() != d.1.relations());
    }

    #[test]
    fn split_rejects_insufficient_relations() {
        let c = corpus_with(80, 2);
        assert!(split_relations(&c, 80, 1, 1, 0).is_err());
    }

    #[test]
    fn instance_validation_catches_bad_spans() {
        let err = SentenceInstance::new(
            vec!["a".into(), "b".into()],
            Span::new(0, 5),
            Span::new(1, 1),
            "r".into(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("exceeds"));

        assert!(SentenceInstance::new(
            vec!["a".into(), "b".into(), "c".into()],
            Span::new(0, 1),
            Span::new(1, 2),
            "r".into(),
        )
        .is_err());
    }
}
