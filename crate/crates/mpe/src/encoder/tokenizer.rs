//! Whitespace-level vocabulary with a deterministic sub-word fallback:
//! words outside the vocabulary split into character pieces (the first
//! piece bare, continuations prefixed with `##`), so downstream tagging
//! exercises the X label path. Characters missing from the vocabulary
//! map to the unknown piece.

use std::collections::HashMap;

use crate::corpus::{Corpus, SubtokenMap};
use crate::error::DataError;

pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";
pub const UNK_TOKEN: &str = "[UNK]";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Build from every word (and every character of every word) in the
    /// given corpora. The vocabulary is shared across splits, like the
    /// fixed tokenizer of a pretrained encoder.
    pub fn build(corpora: &[&Corpus]) -> Vocab {
        let mut words = std::collections::BTreeSet::new();
        let mut chars = std::collections::BTreeSet::new();
        for corpus in corpora {
            for inst in corpus.instances() {
                for tok in &inst.tokens {
                    words.insert(tok.clone());
                    for ch in tok.chars() {
                        chars.insert(ch);
                    }
                }
            }
        }
        let mut id_to_token: Vec<String> =
            vec![CLS_TOKEN.into(), SEP_TOKEN.into(), UNK_TOKEN.into()];
        id_to_token.extend(words);
        for ch in &chars {
            let piece = ch.to_string();
            if !id_to_token.contains(&piece) {
                id_to_token.push(piece);
            }
        }
        for ch in &chars {
            id_to_token.push(format!("##{ch}"));
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab {
            token_to_id,
            id_to_token,
        }
    }

    pub fn from_tokens(id_to_token: Vec<String>) -> Result<Vocab, DataError> {
        if id_to_token.len() < 3
            || id_to_token[0] != CLS_TOKEN
            || id_to_token[1] != SEP_TOKEN
            || id_to_token[2] != UNK_TOKEN
        {
            return Err(DataError::Invalid(
                "vocabulary must start with [CLS], [SEP], [UNK]".into(),
            ));
        }
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, t) in id_to_token.iter().enumerate() {
            if token_to_id.insert(t.clone(), i as u32).is_some() {
                return Err(DataError::Invalid(format!("duplicate vocab entry `{t}`")));
            }
        }
        Ok(Vocab {
            token_to_id,
            id_to_token,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn cls_id(&self) -> u32 {
        0
    }

    pub fn sep_id(&self) -> u32 {
        1
    }

    pub fn unk_id(&self) -> u32 {
        2
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Subtoken ids (without boundary tokens) plus the word -> subtoken
    /// alignment for a tokenized sentence.
    pub fn encode_words(&self, words: &[String]) -> (Vec<u32>, SubtokenMap) {
        let mut ids = Vec::with_capacity(words.len());
        let mut map = Vec::with_capacity(words.len());
        for word in words {
            let mut subs = Vec::new();
            if let Some(id) = self.id_of(word) {
                subs.push(ids.len());
                ids.push(id);
            } else {
                for (j, ch) in word.chars().enumerate() {
                    let piece = if j == 0 {
                        ch.to_string()
                    } else {
                        format!("##{ch}")
                    };
                    let id = self.id_of(&piece).unwrap_or_else(|| self.unk_id());
                    subs.push(ids.len());
                    ids.push(id);
                }
            }
            map.push(subs);
        }
        let map = SubtokenMap::new(map).expect("contiguous by construction");
        (ids, map)
    }
}
