use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;

/// Lower-cases and splits on whitespace; ASCII punctuation becomes its own
/// token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let mut current = String::new();
        for ch in word.chars() {
            if ch.is_ascii_punctuation() && ch != '\'' {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(ch.to_string());
            } else {
                current.extend(ch.to_lowercase());
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

/// Token ↔ id table. Ids 0-3 are the special markers.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<&str> = tokens.into_iter().collect();
        let mut all: Vec<String> = [PAD, BOS, EOS, UNK].iter().map(|s| s.to_string()).collect();
        all.extend(
            words
                .into_iter()
                .filter(|w| ![PAD, BOS, EOS, UNK].contains(w))
                .map(str::to_string),
        );
        Self::from_list(all)
    }

    fn from_list(tokens: Vec<String>) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(UNK)
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|i| self.token(*i).to_string()).collect()
    }

    /// One token per line.
    pub fn to_text(&self) -> String {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        let expected = [PAD, BOS, EOS, UNK];
        if tokens.len() < 4 || tokens[..4].iter().zip(expected).any(|(a, b)| a != b) {
            return Err(Error::Format("vocabulary must start with <pad> <bos> <eos> <unk>".into()));
        }
        let unique: BTreeSet<&String> = tokens.iter().collect();
        if unique.len() != tokens.len() {
            return Err(Error::Format("vocabulary contains duplicate tokens".into()));
        }
        Ok(Self::from_list(tokens))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
