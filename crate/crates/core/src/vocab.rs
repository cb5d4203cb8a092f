//! Word-level tokenizer and vocabulary.
//!
//! Text is lowercased and split on whitespace; punctuation characters become
//! single-character tokens of their own. The vocabulary is built from a
//! training corpus, with five fixed special tokens at reserved ids:
//! PAD=0, BOS=1, EOS=2, STOP=3, UNK=4. Unknown words encode to UNK.
//!
//! Vocab files are plain text, one `token<TAB>id` line per entry, sorted by id.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{CoreError, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const STOP: usize = 3;
pub const UNK: usize = 4;

/// Special token surface forms, index == id.
pub const SPECIAL_TOKENS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<stop>", "<unk>"];

/// Lowercase and split: alphanumeric runs are word tokens, every other
/// non-whitespace character is its own single-character token.
pub fn tokenize_text(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

impl Vocab {
    /// Build from a corpus of texts: specials first, then every distinct word
    /// token in sorted order (deterministic regardless of corpus order).
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(CoreError::Data(
                "cannot build a vocabulary from an empty corpus".to_string(),
            ));
        }
        let mut words = BTreeSet::new();
        for text in corpus {
            for tok in tokenize_text(text.as_ref()) {
                words.insert(tok);
            }
        }
        let mut id_to_token: Vec<String> =
            SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(words);
        Ok(Self::from_table(id_to_token))
    }

    fn from_table(id_to_token: Vec<String>) -> Self {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab {
            id_to_token,
            token_to_id,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// Tokenize text and map each token to its id (UNK when absent).
    /// Empty text gives an empty list.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize_text(text)
            .into_iter()
            .map(|tok| self.id(&tok).unwrap_or(UNK))
            .collect()
    }

    /// Join the surface forms of `ids` with single spaces. Inverse of
    /// [`Vocab::encode`] on normalized in-vocab text.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(self.token(id).unwrap_or(SPECIAL_TOKENS[UNK]));
        }
        out
    }

    /// Write `token<TAB>id` lines sorted by id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for (id, tok) in self.id_to_token.iter().enumerate() {
            text.push_str(tok);
            text.push('\t');
            text.push_str(&id.to_string());
            text.push('\n');
        }
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Read a vocab file, validating contiguous ids and the special-token
    /// block.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::Data(format!("cannot read vocab {}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, id_str) = line.split_once('\t').ok_or_else(|| {
                CoreError::Data(format!("vocab line {} has no tab: {line:?}", lineno + 1))
            })?;
            let id: usize = id_str.parse().map_err(|_| {
                CoreError::Data(format!("vocab line {}: bad id {id_str:?}", lineno + 1))
            })?;
            entries.push((id, tok.to_string()));
        }
        entries.sort();
        let mut id_to_token = Vec::with_capacity(entries.len());
        for (expect, (id, tok)) in entries.into_iter().enumerate() {
            if id != expect {
                return Err(CoreError::Data(format!(
                    "vocab ids not contiguous: expected {expect}, found {id}"
                )));
            }
            id_to_token.push(tok);
        }
        for (id, want) in SPECIAL_TOKENS.iter().enumerate() {
            if id_to_token.get(id).map(String::as_str) != Some(*want) {
                return Err(CoreError::Data(format!(
                    "vocab special token {id} must be {want:?}, found {:?}",
                    id_to_token.get(id)
                )));
            }
        }
        let vocab = Self::from_table(id_to_token);
        if vocab.token_to_id.len() != vocab.id_to_token.len() {
            return Err(CoreError::Data("vocab contains duplicate tokens".to_string()));
        }
        Ok(vocab)
    }
}
