//! Whitespace tokenizer over a closed vocabulary.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const EOS: &str = "<eos>";
pub const PAD: &str = "<pad>";
pub const REPLACE: &str = "[replace]";
pub const ADD: &str = "[add]";
pub const RESERVED: [&str; 4] = [EOS, PAD, REPLACE, ADD];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

pub const EOS_ID: TokenId = 0;
pub const REPLACE_ID: TokenId = 2;
pub const ADD_ID: TokenId = 3;

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()].iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::Dataset(format!("vocabulary must start with {RESERVED:?}")));
        }
        let index: HashMap<String, TokenId> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tokens.len() {
            return Err(Error::Dataset("vocabulary has duplicate tokens".into()));
        }
        Ok(Vocab { tokens, index })
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Reserved tokens first (ids 0..4), then every distinct whitespace token
    /// of `lines` in first-seen order.
    pub fn build<'a>(lines: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut seen: HashMap<String, TokenId> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for line in lines {
            for w in line.split_whitespace() {
                if !seen.contains_key(w) {
                    seen.insert(w.to_string(), tokens.len());
                    tokens.push(w.to_string());
                }
            }
        }
        Ok(Vocab { tokens, index: seen })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn eos(&self) -> TokenId {
        EOS_ID
    }

    pub fn replace_marker(&self) -> TokenId {
        REPLACE_ID
    }

    pub fn add_marker(&self) -> TokenId {
        ADD_ID
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    pub fn is_reserved(&self, id: TokenId) -> bool {
        id < RESERVED.len()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::Dataset(format!("unknown token {w:?}"))))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_tokens_come_first() {
        let v = Vocab::build(["a b", "b c"]).unwrap();
        assert_eq!(v.eos(), 0);
        assert_eq!(v.id(PAD), Some(1));
        assert_eq!(v.replace_marker(), 2);
        assert_eq!(v.add_marker(), 3);
        assert_eq!(v.len(), 7);
        assert_eq!(v.encode("c a").unwrap(), vec![6, 4]);
        assert_eq!(v.decode(&[4, 5]), "a b");
        assert!(v.encode("zzz").is_err());
    }

    #[test]
    fn serializes_as_token_list() {
        let v = Vocab::build(["x y"]).unwrap();
        let s = serde_json::to_string(&v).unwrap();
        assert!(s.starts_with("[\"<eos>\""));
        let back: Vocab = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
        assert!(serde_json::from_str::<Vocab>(r#"["a","<eos>","<pad>","[replace]","[add]"]"#).is_err());
        assert!(serde_json::from_str::<Vocab>(r#"["<eos>","<pad>","[replace]","[add]","a","a"]"#).is_err());
    }
}
