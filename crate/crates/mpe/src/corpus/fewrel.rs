//! FewRel-style ingestion: a JSON object keyed by relation label, each
//! holding a list of records with `tokens` and `h`/`t` mentions of the
//! shape `[surface, kb_id, [[token indices...], ...]]`.
//!
//! Mention normalization convention: only the FIRST listed mention of
//! each of `h` and `t` is kept (one triple per sentence), and its token
//! index list is collapsed to the inclusive range `[min, max]`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use serde::Deserialize;

use crate::corpus::{Corpus, SentenceInstance, Span, SplitTag};
use crate::error::DataError;

#[derive(Debug, Deserialize)]
struct Mention(
    #[allow(dead_code)] String,
    #[allow(dead_code)] serde_json::Value,
    Vec<Vec<usize>>,
);

#[derive(Debug, Deserialize)]
struct FewRelRecord {
    tokens: Vec<String>,
    h: Mention,
    t: Mention,
}

fn mention_span(m: &Mention, role: &str, locator: &str) -> Result<Span, DataError> {
    let first = m
        .2
        .first()
        .ok_or_else(|| DataError::validation(locator, format!("{role} has no mention")))?;
    if first.is_empty() {
        return Err(DataError::validation(
            locator,
            format!("{role} mention has an empty index list"),
        ));
    }
    let start = *first.iter().min().expect("non-empty");
    let end = *first.iter().max().expect("non-empty");
    Ok(Span { start, end })
}

/// Parse a FewRel-style buffer into a corpus (tagged as `train`; use
/// [`crate::corpus::split_relations`] afterwards). Instance counts per
/// relation are preserved.
pub fn parse_fewrel(bytes: &[u8]) -> Result<Corpus, DataError> {
    let raw: BTreeMap<String, Vec<serde_json::Value>> = serde_json::from_slice(bytes)
        .map_err(|e| DataError::parse("fewrel file", e.to_string()))?;
    if raw.is_empty() {
        return Err(DataError::parse("fewrel file", "no relations in file"));
    }
    let mut instances = Vec::new();
    for (relation, records) in &raw {
        if records.is_empty() {
            return Err(DataError::validation(
                format!("relation {relation}"),
                "empty relation group",
            ));
        }
        for (index, value) in records.iter().enumerate() {
            let locator = format!("relation {relation} record {index}");
            let record: FewRelRecord = serde_json::from_value(value.clone())
                .map_err(|e| DataError::parse(&locator, e.to_string()))?;
            let head_span = mention_span(&record.h, "head", &locator)?;
            let tail_span = mention_span(&record.t, "tail", &locator)?;
            let inst = SentenceInstance {
                tokens: record.tokens,
                head_span,
                tail_span,
                relation: relation.clone(),
            };
            inst.validate(&locator)?;
            instances.push(inst);
        }
    }
    Corpus::new(SplitTag::Train, instances)
}

pub fn load_fewrel(path: impl AsRef<Path>) -> Result<Corpus, DataError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path.as_ref())?).read_to_end(&mut bytes)?;
    parse_fewrel(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(tokens: &[&str], h: (usize, usize), t: (usize, usize)) -> serde_json::Value {
        serde_json::json!({
            "tokens": tokens,
            "h": ["h-surface", "Q1", [ (h.0..=h.1).collect::<Vec<_>>() ]],
            "t": ["t-surface", "Q2", [ (t.0..=t.1).collect::<Vec<_>>() ]],
        })
    }

    #[test]
    fn parses_relation_groups_and_preserves_counts() {
        let file = serde_json::json!({
            "P1": [record(&["a", "b", "c"], (0, 0), (2, 2)),
                   record(&["d", "e", "f", "g"], (1, 2), (3, 3))],
            "P2": [record(&["x", "y", "z"], (2, 2), (0, 0))],
        });
        let corpus = parse_fewrel(file.to_string().as_bytes()).unwrap();
        assert_eq!(corpus.n_relations(), 2);
        assert_eq!(corpus.group("P1").unwrap().len(), 2);
        assert_eq!(corpus.group("P2").unwrap().len(), 1);
        assert_eq!(corpus.group("P1").unwrap()[1].head_span, Span::new(1, 2));
    }

    #[test]
    fn empty_file_is_an_error_not_an_empty_corpus() {
        assert!(parse_fewrel(b"{}").is_err());
        assert!(parse_fewrel(b"").is_err());
    }

    #[test]
    fn out_of_bounds_span_names_the_record() {
        let file = serde_json::json!({
            "P1": [record(&["a", "b"], (0, 0), (1, 1)),
                   record(&["a", "b"], (0, 0), (5, 5))],
        });
        let err = parse_fewrel(file.to_string().as_bytes()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("P1") && msg.contains("record 1"), "{msg}");
    }

    #[test]
    fn malformed_record_names_the_index() {
        let file = r#"{"P1": [{"tokens": ["a"], "h": "nope", "t": "nope"}]}"#;
        let err = parse_fewrel(file.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("record 0"), "{err}");
    }

    #[test]
    fn only_the_first_mention_is_kept() {
        let file = serde_json::json!({
            "P1": [{
                "tokens": ["a", "b", "c", "d"],
                "h": ["s", "Q1", [[0], [3]]],
                "t": ["s", "Q2", [[2]]],
            }],
        });
        let corpus = parse_fewrel(file.to_string().as_bytes()).unwrap();
        assert_eq!(corpus.group("P1").unwrap()[0].head_span, Span::new(0, 0));
    }
}
