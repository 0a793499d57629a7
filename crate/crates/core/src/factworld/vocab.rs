// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeSet, HashMap};

use super::{World, RELATIONS};
use crate::error::{Error, Result};
use crate::model::special;

pub const SPECIAL_TOKENS: [&str; special::COUNT] = ["<pad>", "<s>", "</s>", "<sentinel>"];

/// Word-level vocabulary: the four special tokens at their fixed ids, then
/// all other words in lexicographic order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Self {
        let set: BTreeSet<String> = words
            .into_iter()
            .filter(|w| !SPECIAL_TOKENS.contains(&w.as_str()))
            .collect();
        let words: Vec<String> = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(set)
            .collect();
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(|s| s.as_str())
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| {
                self.id(t.as_ref())
                    .ok_or_else(|| Error::data(format!("unknown token {:?}", t.as_ref())))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&i| {
                self.word(i)
                    .map(String::from)
                    .ok_or_else(|| Error::data(format!("token id {i} outside vocabulary of {}", self.len())))
            })
            .collect()
    }
}

/// Every entity surface plus every word of the templates and questions of
/// the relations in use.
pub fn build_vocab(world: &World) -> Vocab {
    let mut words: Vec<String> = world.entities.iter().map(|e| e.surface.clone()).collect();
    for rel in &RELATIONS[..world.n_relations] {
        for text in rel.templates.iter().chain(std::iter::once(&rel.question)) {
            words.extend(
                text.split(' ')
                    .filter(|w| *w != "{s}" && *w != "{o}")
                    .map(String::from),
            );
        }
    }
    Vocab::from_words(words)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factworld::{generate_world, render_qa, render_statements, Partition, WorldConfig};

    #[test]
    fn specials_sit_at_fixed_ids_once() {
        let v = build_vocab(&generate_world(&WorldConfig::default()).unwrap());
        assert_eq!(v.id("<pad>"), Some(special::PAD));
        assert_eq!(v.id("<s>"), Some(special::BOS));
        assert_eq!(v.id("</s>"), Some(special::EOS));
        assert_eq!(v.id("<sentinel>"), Some(special::SENTINEL));
        for s in SPECIAL_TOKENS {
            assert_eq!(v.words().iter().filter(|w| *w == s).count(), 1);
        }
    }

    #[test]
    fn size_is_unique_words_plus_specials() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        let v = build_vocab(&w);
        let mut uniq = BTreeSet::new();
        for p in [Partition::Base, Partition::New, Partition::Withheld] {
            for s in render_statements(&w, p) {
                uniq.extend(s.tokens);
            }
            for q in render_qa(&w, p) {
                uniq.extend(q.question);
            }
        }
        for e in &w.entities {
            uniq.insert(e.surface.clone());
        }
        assert_eq!(v.len(), uniq.len() + 4);
        let rest = &v.words()[4..];
        assert!(rest.windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn encode_decode_round_trip() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        let v = build_vocab(&w);
        for s in render_statements(&w, Partition::Base).iter().take(50) {
            assert_eq!(v.decode(&v.encode(&s.tokens).unwrap()).unwrap(), s.tokens);
        }
        assert!(matches!(v.encode(&["zzz-unknown"]), Err(Error::Data(_))));
    }
}
