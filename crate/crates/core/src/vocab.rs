//! Vocabulary construction and tokenization.
//!
//! Ids 0..3 are reserved: 0 = padding, 1 = unknown, 2 = the end-of-utterance
//! separator inserted between utterances when a context is flattened.
//! Remaining ids are assigned from the training corpus only, ordered by
//! descending frequency with ties broken lexicographically, which makes
//! vocabulary construction fully deterministic.

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const EOU_ID: usize = 2;

pub const PAD_TOKEN: &str = "__pad__";
pub const UNK_TOKEN: &str = "__unk__";
pub const EOU_TOKEN: &str = "__eou__";

/// Token/id bijection with fixed special ids.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

/// Lowercases, separates punctuation into standalone tokens, splits on
/// whitespace. Tokens that are already special markers (wrapped in
/// double underscores or angle brackets) pass through unsplit.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let word = word.to_lowercase();
        if (word.starts_with("__") && word.ends_with("__") && word.len() > 4)
            || (word.starts_with('<') && word.ends_with('>') && word.len() > 2)
        {
            tokens.push(word);
            continue;
        }
        let mut current = String::new();
        for c in word.chars() {
            if c.is_ascii_punctuation() {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(c.to_string());
            } else {
                current.push(c);
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

impl Vocabulary {
    /// Build from tokenized sentences. Tokens with frequency below
    /// `min_count` map to the unknown id.
    pub fn build(sentences: &[Vec<String>], min_count: usize) -> Result<Self> {
        if sentences.iter().all(|s| s.is_empty()) {
            return Err(Error::EmptyCorpus);
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for sentence in sentences {
            for token in sentence {
                *counts.entry(token.as_str()).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_count && t != PAD_TOKEN && t != UNK_TOKEN && t != EOU_TOKEN)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut vocab = Self::specials_only();
        for (token, _) in kept {
            vocab.push(token.to_string());
        }
        Ok(vocab)
    }

    fn specials_only() -> Self {
        let mut vocab = Vocabulary {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
        };
        for special in [PAD_TOKEN, UNK_TOKEN, EOU_TOKEN] {
            vocab.push(special.to_string());
        }
        vocab
    }

    fn push(&mut self, token: String) {
        let id = self.id_to_token.len();
        self.token_to_id.insert(token.clone(), id);
        self.id_to_token.push(token);
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // specials are always present
    }

    /// Id for a token, falling back to the unknown id.
    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.id_to_token
            .get(id)
            .map(String::as_str)
            .ok_or(Error::IndexOutOfRange {
                what: "token id",
                index: id,
                limit: self.id_to_token.len(),
            })
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Tokens in id order, specials first.
    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// One token per line, id = line index. The special rows are written
    /// explicitly so the file alone reconstructs the vocabulary.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        for token in &self.id_to_token {
            writeln!(file, "{token}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut vocab = Vocabulary {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
        };
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let token = line?.trim().to_string();
            if token.is_empty() {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    msg: "empty vocabulary line".to_string(),
                });
            }
            vocab.push(token);
        }
        let expected = [PAD_TOKEN, UNK_TOKEN, EOU_TOKEN];
        for (id, token) in expected.iter().enumerate() {
            if vocab.id_to_token.get(id).map(String::as_str) != Some(*token) {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: id + 1,
                    msg: format!("expected special token {token} at id {id}"),
                });
            }
        }
        Ok(vocab)
    }
}
