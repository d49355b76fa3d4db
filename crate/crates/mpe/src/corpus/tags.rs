//! The six-label entity tagging scheme plus sequence boundary labels,
//! word/subtoken alignment, and span <-> tag conversion.

use serde::{Deserialize, Serialize};

use crate::corpus::Span;
use crate::error::DataError;

/// Per-position labels. `X` marks non-first subtokens of a word split by
/// the tokenizer; `Start`/`End` are the sequence boundary labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tag {
    BHead,
    IHead,
    BTail,
    ITail,
    Outside,
    X,
    Start,
    End,
}

impl Tag {
    /// Total label count including the boundary labels.
    pub const COUNT: usize = 8;

    pub fn index(self) -> usize {
        match self {
            Tag::BHead => 0,
            Tag::IHead => 1,
            Tag::BTail => 2,
            Tag::ITail => 3,
            Tag::Outside => 4,
            Tag::X => 5,
            Tag::Start => 6,
            Tag::End => 7,
        }
    }

    pub fn from_index(i: usize) -> Option<Tag> {
        [
            Tag::BHead,
            Tag::IHead,
            Tag::BTail,
            Tag::ITail,
            Tag::Outside,
            Tag::X,
            Tag::Start,
            Tag::End,
        ]
        .get(i)
        .copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Tag::BHead => "B-Head",
            Tag::IHead => "I-Head",
            Tag::BTail => "B-Tail",
            Tag::ITail => "I-Tail",
            Tag::Outside => "O",
            Tag::X => "X",
            Tag::Start => "<s>",
            Tag::End => "</s>",
        }
    }
}

/// Word index -> ordered, contiguous subtoken indices. The lists
/// partition `0..n_subtokens` in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubtokenMap {
    word_to_subtokens: Vec<Vec<usize>>,
    n_subtokens: usize,
}

impl SubtokenMap {
    pub fn new(word_to_subtokens: Vec<Vec<usize>>) -> Result<Self, DataError> {
        let mut expected = 0usize;
        for (w, subs) in word_to_subtokens.iter().enumerate() {
            if subs.is_empty() {
                return Err(DataError::validation(
                    format!("word {w}"),
                    "empty subtoken list",
                ));
            }
            for &s in subs {
                if s != expected {
                    return Err(DataError::validation(
                        format!("word {w}"),
                        format!("subtoken {s} breaks the contiguous partition"),
                    ));
                }
                expected += 1;
            }
        }
        Ok(SubtokenMap {
            word_to_subtokens,
            n_subtokens: expected,
        })
    }

    /// One subtoken per word.
    pub fn identity(n_words: usize) -> Self {
        SubtokenMap {
            word_to_subtokens: (0..n_words).map(|i| vec![i]).collect(),
            n_subtokens: n_words,
        }
    }

    pub fn n_words(&self) -> usize {
        self.word_to_subtokens.len()
    }

    pub fn n_subtokens(&self) -> usize {
        self.n_subtokens
    }

    pub fn subtokens_of(&self, word: usize) -> &[usize] {
        &self.word_to_subtokens[word]
    }

    pub fn first_subtoken(&self, word: usize) -> usize {
        self.word_to_subtokens[word][0]
    }

    pub fn word_of_subtoken(&self, subtoken: usize) -> Option<usize> {
        self.word_to_subtokens
            .iter()
            .position(|subs| subs.contains(&subtoken))
    }
}

/// A validated gold label sequence of length `n_subtokens + 2`:
/// `Start`, per-subtoken entity labels, `End`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagSequence {
    labels: Vec<Tag>,
}

impl TagSequence {
    pub fn from_labels(labels: Vec<Tag>) -> Result<Self, DataError> {
        validate_labels(&labels)?;
        Ok(TagSequence { labels })
    }

    pub fn labels(&self) -> &[Tag] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Label indices for CRF scoring.
    pub fn indices(&self) -> Vec<usize> {
        self.labels.iter().map(|t| t.index()).collect()
    }
}

/// Check the gold-sequence invariants: boundary labels at both ends,
/// exactly one B-Head and one B-Tail, I- labels only continuing a run of
/// their own role (X may interrupt a run), X never at a first-subtoken
/// position of a run start.
pub fn validate_labels(labels: &[Tag]) -> Result<(), DataError> {
    if labels.len() < 2 || labels[0] != Tag::Start || labels[labels.len() - 1] != Tag::End {
        return Err(DataError::validation(
            "tag sequence",
            "missing boundary labels",
        ));
    }
    let inner = &labels[1..labels.len() - 1];
    if inner.iter().any(|t| matches!(t, Tag::Start | Tag::End)) {
        return Err(DataError::validation(
            "tag sequence",
            "boundary label inside the sequence",
        ));
    }
    let b_heads = inner.iter().filter(|t| **t == Tag::BHead).count();
    let b_tails = inner.iter().filter(|t| **t == Tag::BTail).count();
    if b_heads != 1 || b_tails != 1 {
        return Err(DataError::validation(
            "tag sequence",
            format!("expected exactly one B-Head and one B-Tail, got {b_heads}/{b_tails}"),
        ));
    }
    if inner.first() == Some(&Tag::X) {
        return Err(DataError::validation(
            "tag sequence",
            "X at the first position",
        ));
    }
    // role of the run an X continues: track last non-X tag
    let mut last_solid: Option<Tag> = None;
    for (i, t) in inner.iter().enumerate() {
        match t {
            Tag::IHead => {
                if !matches!(last_solid, Some(Tag::BHead) | Some(Tag::IHead)) {
                    return Err(DataError::validation(
                        format!("position {i}"),
                        "I-Head without a head run",
                    ));
                }
            }
            Tag::ITail => {
                if !matches!(last_solid, Some(Tag::BTail) | Some(Tag::ITail)) {
                    return Err(DataError::validation(
                        format!("position {i}"),
                        "I-Tail without a tail run",
                    ));
                }
            }
            Tag::X => continue,
            _ => {}
        }
        last_solid = Some(*t);
    }
    Ok(())
}

/// Label every subtoken of an instance. The first subtoken of the first
/// head word gets B-Head, later head words get I-Head on their first
/// subtoken, and every non-first subtoken gets X; analogously for the
/// tail; everything else is O. Boundary labels wrap the sequence.
pub fn to_tag_sequence(
    head_span: Span,
    tail_span: Span,
    sub: &SubtokenMap,
) -> Result<TagSequence, DataError> {
    if head_span.overlaps(&tail_span) {
        return Err(DataError::validation(
            "spans",
            format!("head {head_span:?} overlaps tail {tail_span:?}"),
        ));
    }
    let n_words = sub.n_words();
    if head_span.end >= n_words || tail_span.end >= n_words {
        return Err(DataError::validation(
            "spans",
            format!("span beyond the {n_words} mapped words"),
        ));
    }
    let mut labels = vec![Tag::Start];
    for word in 0..n_words {
        let role = if head_span.contains(word) {
            Some((word == head_span.start, true))
        } else if tail_span.contains(word) {
            Some((word == tail_span.start, false))
        } else {
            None
        };
        for (j, _) in sub.subtokens_of(word).iter().enumerate() {
            let tag = match (role, j) {
                (Some((first, is_head)), 0) => match (first, is_head) {
                    (true, true) => Tag::BHead,
                    (false, true) => Tag::IHead,
                    (true, false) => Tag::BTail,
                    (false, false) => Tag::ITail,
                },
                (_, _) if j > 0 => Tag::X,
                _ => Tag::Outside,
            };
            labels.push(tag);
        }
    }
    labels.push(Tag::End);
    TagSequence::from_labels(labels)
}

/// Word-level spans recovered from a (possibly predicted, possibly
/// invalid) label sequence over `n+2` positions. X positions never
/// determine a boundary; the first B- of each role opens its span and the
/// run extends through I- labels of the same role (X in between is
/// skipped). Returns `None` for a role whose B- label is absent.
pub fn spans_from_labels(
    labels: &[Tag],
    sub: &SubtokenMap,
) -> (Option<Span>, Option<Span>) {
    let head = span_of_role(labels, sub, Tag::BHead, Tag::IHead);
    let tail = span_of_role(labels, sub, Tag::BTail, Tag::ITail);
    (head, tail)
}

fn span_of_role(labels: &[Tag], sub: &SubtokenMap, begin: Tag, inside: Tag) -> Option<Span> {
    let inner_len = labels.len().saturating_sub(2);
    let b_pos = (0..inner_len).find(|i| labels[i + 1] == begin)?;
    let start_word = sub.word_of_subtoken(b_pos)?;
    let mut end_word = start_word;
    let mut i = b_pos + 1;
    while i < inner_len {
        match labels[i + 1] {
            Tag::X => {}
            t if t == inside => {
                end_word = sub.word_of_subtoken(i)?;
            }
            _ => break,
        }
        i += 1;
    }
    Some(Span {
        start: start_word,
        end: end_word,
    })
}
