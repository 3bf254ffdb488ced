//! Tokenization, vocabulary and padded encoding.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use capsgraph_core::model::{PAD_ID, UNK_ID};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

/// Lowercases, drops everything but letters, digits and whitespace, then
/// splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

/// Token ↔ id map with `<pad>` = 0 and `<unk>` = 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    ids: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Counts tokens over `corpus`, keeps those seen at least `min_count`
    /// times, most frequent first (ties lexicographic), capped so the whole
    /// vocabulary including specials has at most `max_size` entries.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>, min_count: usize, max_size: usize) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut docs = 0;
        for text in corpus {
            docs += 1;
            for tok in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if docs == 0 {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().filter(|(_, n)| *n >= min_count.max(1)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size.saturating_sub(2));
        Ok(Self::from_tokens(ranked.into_iter().map(|(t, _)| t)))
    }

    fn from_tokens(corpus_tokens: impl IntoIterator<Item = String>) -> Self {
        let mut tokens = vec![PAD.to_owned(), UNK.to_owned()];
        tokens.extend(corpus_tokens);
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { ids, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Token ids for `text`, truncated or padded to exactly `len`.
    pub fn encode(&self, text: &str, len: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = tokenize(text).iter().take(len).map(|t| self.id(t)).collect();
        ids.resize(len, PAD_ID);
        ids
    }

    /// Tokens for the non-pad ids.
    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter()
            .filter(|&&id| id != PAD_ID)
            .map(|&id| self.token(id).unwrap_or(UNK))
            .collect()
    }

    /// `token\tid` per line.
    pub fn to_text(&self) -> String {
        self.tokens.iter().enumerate().map(|(i, t)| format!("{t}\t{i}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::Data(format!("vocabulary line {}: expected `token<TAB>id`", n + 1)))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("vocabulary line {}: bad id `{id}`", n + 1)))?;
            if id != n {
                return Err(Error::Data(format!("vocabulary line {}: id {id} out of sequence", n + 1)));
            }
            tokens.push(tok.to_owned());
        }
        if tokens.len() < 2 || tokens[PAD_ID] != PAD || tokens[UNK_ID] != UNK {
            return Err(Error::Data("vocabulary must start with <pad> and <unk>".into()));
        }
        let vocab = Self::from_tokens(tokens.into_iter().skip(2));
        if vocab.ids.len() != vocab.tokens.len() {
            return Err(Error::Data("vocabulary has duplicate tokens".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_then_lexicographic() {
        let v = Vocabulary::build(["a b", "a"], 1, 100).unwrap();
        assert_eq!(v.tokens(), &["<pad>", "<unk>", "a", "b"]);
        let v = Vocabulary::build(["c b", "b c", "a"], 1, 100).unwrap();
        assert_eq!(v.tokens(), &["<pad>", "<unk>", "b", "c", "a"]);
    }

    #[test]
    fn min_count_and_max_size() {
        let v = Vocabulary::build(["a b", "a"], 2, 100).unwrap();
        assert_eq!(v.tokens(), &["<pad>", "<unk>", "a"]);
        let v = Vocabulary::build(["a b c", "a b", "a"], 1, 4).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.id("c"), UNK_ID);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(Vocabulary::build(std::iter::empty(), 1, 10).is_err());
    }

    #[test]
    fn battery_sentence() {
        let text = "The battery has a long life";
        let v = Vocabulary::build([text], 1, 100).unwrap();
        let ids = v.encode(text, 8);
        assert_eq!(ids.len(), 8);
        assert!(ids[..6].iter().all(|&i| i > UNK_ID));
        assert_eq!(&ids[6..], &[PAD_ID, PAD_ID]);
        assert_eq!(v.decode(&ids), tokenize(text));
    }

    #[test]
    fn empty_and_long_text() {
        let v = Vocabulary::build(["x y z"], 1, 10).unwrap();
        assert_eq!(v.encode("", 4), vec![PAD_ID; 4]);
        let ids = v.encode("x y z x y", 3);
        assert_eq!(v.decode(&ids), ["x", "y", "z"]);
    }

    #[test]
    fn punctuation_and_case() {
        assert_eq!(tokenize("Hello, World! It's 2024."), ["hello", "world", "its", "2024"]);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = Vocabulary::build(["known"], 1, 10).unwrap();
        assert_eq!(v.encode("known stranger", 2), vec![2, UNK_ID]);
    }

    #[test]
    fn text_round_trip() {
        let v = Vocabulary::build(["b a c a"], 1, 10).unwrap();
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
        assert!(Vocabulary::from_text("<pad>\t0\nx\t2\n").is_err());
        assert!(Vocabulary::from_text("a\t0\nb\t1\n").is_err());
    }
}
