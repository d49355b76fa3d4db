//! The canonical corpus format: one JSON record per line with fields
//! `tokens`, `head_span`, `tail_span`, `relation`, `split`. All
//! experiment tooling consumes this format; the FewRel adapter converts
//! into it.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, SentenceInstance, Span, SplitTag};
use crate::error::DataError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CanonicalRecord {
    pub tokens: Vec<String>,
    pub head_span: Span,
    pub tail_span: Span,
    pub relation: String,
    pub split: String,
}

impl CanonicalRecord {
    pub fn from_instance(inst: &SentenceInstance, split: &str) -> Self {
        CanonicalRecord {
            tokens: inst.tokens.clone(),
            head_span: inst.head_span,
            tail_span: inst.tail_span,
            relation: inst.relation.clone(),
            split: split.to_string(),
        }
    }

    pub fn into_instance(self, locator: &str) -> Result<SentenceInstance, DataError> {
        let inst = SentenceInstance {
            tokens: self.tokens,
            head_span: self.head_span,
            tail_span: self.tail_span,
            relation: self.relation,
        };
        inst.validate(locator)?;
        Ok(inst)
    }
}

pub fn write_canonical<W: Write>(
    w: &mut W,
    records: impl IntoIterator<Item = CanonicalRecord>,
) -> Result<(), DataError> {
    for record in records {
        let line = serde_json::to_string(&record)
            .map_err(|e| DataError::Invalid(format!("serialize record: {e}")))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Read line-delimited canonical records; blank lines are skipped.
pub fn read_canonical<R: BufRead>(r: R) -> Result<Vec<CanonicalRecord>, DataError> {
    let mut records = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CanonicalRecord = serde_json::from_str(&line)
            .map_err(|e| DataError::parse(format!("line {}", lineno + 1), e.to_string()))?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(DataError::parse("corpus file", "no records"));
    }
    Ok(records)
}

/// Fuzzing entry point: parse an in-memory canonical corpus buffer and
/// validate every record.
pub fn parse_canonical(bytes: &[u8]) -> Result<Vec<SentenceInstance>, DataError> {
    let records = read_canonical(std::io::Cursor::new(bytes))?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.into_instance(&format!("record {i}")))
        .collect()
}

/// Group records by their split tag into corpora. Records whose split is
/// not train/valid/test are an error here (episode dumps use their own
/// reader).
pub fn corpora_from_records(
    records: Vec<CanonicalRecord>,
) -> Result<BTreeMap<SplitTag, Corpus>, DataError> {
    let mut by_split: BTreeMap<SplitTag, Vec<SentenceInstance>> = BTreeMap::new();
    for (i, record) in records.into_iter().enumerate() {
        let locator = format!("record {i}");
        let tag = SplitTag::parse(&record.split)?;
        by_split
            .entry(tag)
            .or_default()
            .push(record.into_instance(&locator)?);
    }
    let mut out = BTreeMap::new();
    for (tag, instances) in by_split {
        out.insert(tag, Corpus::new(tag, instances)?);
    }
    Ok(out)
}

/// Serialize full split corpora to one canonical buffer.
pub fn corpora_to_records(corpora: &[&Corpus]) -> Vec<CanonicalRecord> {
    let mut records = Vec::new();
    for corpus in corpora {
        for inst in corpus.instances() {
            records.push(CanonicalRecord::from_instance(inst, corpus.split().as_str()));
        }
    }
    records
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_lines() {
        let inst = SentenceInstance::new(
            vec!["a".into(), "b".into(), "c".into()],
            Span::new(0, 0),
            Span::new(2, 2),
            "R1".into(),
        )
        .unwrap();
        let mut buf = Vec::new();
        write_canonical(
            &mut buf,
            [CanonicalRecord::from_instance(&inst, "train")],
        )
        .unwrap();
        let records = read_canonical(std::io::Cursor::new(&buf)).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].clone().into_instance("r").unwrap(), inst);
        assert_eq!(records[0].split, "train");
    }

    #[test]
    fn bad_line_reports_its_number() {
        let buf = b"{\"tokens\":[\"a\",\"b\"],\"head_span\":[0,0],\"tail_span\":[1,1],\"relation\":\"r\",\"split\":\"train\"}\nnot json\n";
        let err = read_canonical(std::io::Cursor::new(&buf[..])).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let buf = br#"{"tokens":["a","b"],"head_span":[0,0],"tail_span":[1,1],"relation":"r","split":"train","extra":1}"#;
        assert!(read_canonical(std::io::Cursor::new(&buf[..])).is_err());
    }
}
