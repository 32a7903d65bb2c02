use std::collections::HashMap;
use std::sync::OnceLock;

use crate::error::{Error, Result};

/// Version tag of the bundled vocabulary file.
pub const VOCAB_VERSION: &str = "v1";

const VOCAB_V1: &str = include_str!("../../data/vocab_v1.txt");

/// Word-level vocabulary shared by every task. Token ids are line numbers of
/// the vocabulary file.
#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_owned).collect();
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Format(format!(
                    "vocab line {}: invalid token {t:?}",
                    i + 1
                )));
            }
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("vocab: duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    /// The frozen bundled vocabulary.
    pub fn builtin() -> &'static Vocab {
        static VOCAB: OnceLock<Vocab> = OnceLock::new();
        VOCAB.get_or_init(|| Vocab::parse(VOCAB_V1).expect("bundled vocabulary is valid"))
    }

    /// Contents of the vocabulary file, one token per line.
    pub fn file_contents() -> &'static str {
        VOCAB_V1
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| Error::Input(format!("unknown token {token:?}")))
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Input(format!("token id {id} out of range")))
    }

    /// Whitespace-separated words to ids.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let words: Result<Vec<&str>> = ids.iter().map(|&i| self.token(i)).collect();
        Ok(words?.join(" "))
    }

    pub(crate) fn must(&self, token: &str) -> usize {
        self.id(token)
            .expect("generator token present in bundled vocabulary")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_round_trips() {
        let v = Vocab::builtin();
        let ids = v.encode("<bos> 3 + 4 =").unwrap();
        assert_eq!(ids.len(), 5);
        assert_eq!(v.decode(&ids).unwrap(), "<bos> 3 + 4 =");
        assert!(v.encode("zebra").is_err());
    }

    #[test]
    fn tokenization_is_injective() {
        let v = Vocab::builtin();
        let mut seen = std::collections::HashSet::new();
        for id in 0..v.len() {
            assert!(seen.insert(v.token(id).unwrap()));
            assert_eq!(v.id(v.token(id).unwrap()).unwrap(), id);
        }
    }

    #[test]
    fn rejects_duplicates() {
        assert!(Vocab::parse("a\nb\na").is_err());
    }
}
