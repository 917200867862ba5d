use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Whitespace-level token alphabet; ids are line numbers, specials first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocabulary::from_full_list(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// Token ids of one transcript, `bos .. eos` when produced by
/// [`Vocabulary::tokenize`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl Vocabulary {
    /// Builds a vocabulary from non-special tokens, prepending the
    /// specials. Duplicates keep their first occurrence.
    pub fn from_tokens<I, T>(tokens: I) -> Self
    where
        I: IntoIterator<Item = T>,
        T: AsRef<str>,
    {
        let mut list: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut seen: HashSet<String> = list.iter().cloned().collect();
        for t in tokens {
            let t = t.as_ref();
            if seen.insert(t.to_string()) {
                list.push(t.to_string());
            }
        }
        Self::from_full_list(list).expect("specials are present and tokens unique")
    }

    /// Validates a full id-ordered token list (as read from a vocabulary
    /// file).
    pub fn from_full_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() + 1 {
            return Err(Error::config("vocabulary", format!("size {} is below the minimum of 5", tokens.len())));
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens[i] != *s {
                return Err(Error::config("vocabulary", format!("line {} must be `{s}`, found `{}`", i + 1, tokens[i])));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::config("vocabulary", format!("token {i} is empty or contains whitespace")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::config("vocabulary", format!("duplicate token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Like [`Vocabulary::from_tokens`] but tolerates a vocabulary with no
    /// regular tokens (only the specials).
    pub(crate) fn specials_plus(tokens: Vec<String>) -> Self {
        let mut list: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        list.extend(tokens);
        let index = list.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocabulary { tokens: list, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: u32) -> bool {
        id <= UNK
    }

    pub fn tokenize(&self, transcript: &str) -> Result<TokenSequence> {
        let words: Vec<&str> = transcript.split_whitespace().collect();
        if words.is_empty() {
            return Err(Error::InvalidInput("cannot tokenize an empty transcript".into()));
        }
        let mut ids = Vec::with_capacity(words.len() + 2);
        ids.push(BOS);
        ids.extend(words.iter().map(|w| self.id(w).unwrap_or(UNK)));
        ids.push(EOS);
        Ok(TokenSequence { ids })
    }

    /// Joins tokens with single spaces, dropping pad/bos and stopping at
    /// the first eos. Unknown ids render as `<unk>`.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut words = Vec::new();
        for &id in ids {
            match id {
                EOS => break,
                PAD | BOS => continue,
                _ => words.push(self.token(id).unwrap_or(SPECIALS[UNK as usize])),
            }
        }
        words.join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_full_list(text.lines().map(str::to_string).collect())
    }
}

/// Specials plus the base-vocabulary tokens that occur in `transcripts`,
/// in first-occurrence order. Tokens absent from the base map to unk and
/// are not added.
pub fn trim_vocabulary<'a, I>(base: &Vocabulary, transcripts: I) -> Vocabulary
where
    I: IntoIterator<Item = &'a str>,
{
    let mut seen = HashSet::new();
    let mut kept = Vec::new();
    for t in transcripts {
        for w in t.split_whitespace() {
            if let Some(id) = base.id(w) {
                if !Vocabulary::is_special(id) && seen.insert(w.to_string()) {
                    kept.push(w.to_string());
                }
            }
        }
    }
    Vocabulary::specials_plus(kept)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ab() -> Vocabulary {
        Vocabulary::from_tokens(["a", "b"])
    }

    #[test]
    fn tokenize_wraps_and_maps_unknowns() {
        let v = ab();
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.tokenize("a b").unwrap().ids, vec![BOS, 4, 5, EOS]);
        assert_eq!(v.tokenize("a z").unwrap().ids, vec![BOS, 4, UNK, EOS]);
        assert!(v.tokenize("  ").is_err());
    }

    #[test]
    fn detokenize_normalizes_whitespace() {
        let v = ab();
        let s = "  a   b a ";
        assert_eq!(v.detokenize(&v.tokenize(s).unwrap().ids), "a b a");
        assert_eq!(v.detokenize(&[BOS, 4, EOS, 5]), "a");
    }

    #[test]
    fn trimming_keeps_used_tokens_in_order() {
        let base = Vocabulary::from_tokens((0..1000).map(|i| format!("w{i}")));
        let text: Vec<String> = (0..30).rev().map(|i| format!("w{i} w{}", (i * 7) % 30)).collect();
        let trimmed = trim_vocabulary(&base, text.iter().map(String::as_str));
        assert_eq!(trimmed.len(), 34);
        assert_eq!(trimmed.token(4), Some("w29"));
        let empty = trim_vocabulary(&base, std::iter::empty());
        assert_eq!(empty.tokens(), &SPECIALS.map(String::from));
    }

    #[test]
    fn file_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let v = ab();
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
        std::fs::write(&p, "<bos>\n<pad>\n<eos>\n<unk>\na\n").unwrap();
        assert!(Vocabulary::load(&p).is_err());
        assert!(Vocabulary::from_full_list(SPECIALS.map(String::from).to_vec()).is_err());
    }
}
