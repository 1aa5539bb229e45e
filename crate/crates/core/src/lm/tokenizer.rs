use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub type TokenId = usize;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

/// Character-level vocabulary. Ids 0..3 are `<bos>`, `<eos>`, `<unk>`, then one
/// token per character, then any appended special tokens (latent prompt).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    chars: HashMap<char, TokenId>,
    specials: HashMap<String, TokenId>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let mut chars = HashMap::new();
        let mut specials = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            let mut it = t.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => {
                    chars.insert(c, i);
                }
                _ => {
                    specials.insert(t.clone(), i);
                }
            }
        }
        Vocabulary {
            tokens,
            chars,
            specials,
        }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Printable ASCII plus newline.
    pub fn ascii() -> Self {
        let chars = std::iter::once('\n').chain((0x20u8..=0x7e).map(char::from));
        Self::from_chars(chars)
    }

    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Self {
        let mut list: Vec<char> = chars.into_iter().collect();
        list.sort_unstable();
        list.dedup();
        let mut tokens = vec![BOS.to_owned(), EOS.to_owned(), UNK.to_owned()];
        tokens.extend(list.into_iter().map(String::from));
        Vocabulary::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bos(&self) -> TokenId {
        self.specials[BOS]
    }

    pub fn eos(&self) -> TokenId {
        self.specials[EOS]
    }

    pub fn unk(&self) -> TokenId {
        self.specials[UNK]
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    pub fn special(&self, name: &str) -> Option<TokenId> {
        self.specials.get(name).copied()
    }

    /// Drops every token with id `n` or above.
    pub(crate) fn truncate(&mut self, n: TokenId) {
        for t in self.tokens.drain(n..) {
            self.specials.remove(&t);
        }
    }

    /// Appends a special token and returns its id.
    pub fn push_special(&mut self, name: String) -> TokenId {
        let id = self.tokens.len();
        self.specials.insert(name.clone(), id);
        self.tokens.push(name);
        id
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let unk = self.unk();
        text.chars().map(|c| self.chars.get(&c).copied().unwrap_or(unk)).collect()
    }

    /// Decodes character tokens; special tokens are dropped.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&id| !self.specials.values().any(|&s| s == id))
            .map(|&id| self.tokens[id].as_str())
            .collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}
