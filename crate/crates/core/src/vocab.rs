//! Word-level vocabulary and the tokenizer shared by text and KG symbols.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;

const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

fn is_split_punct(c: char) -> bool {
    matches!(
        c,
        '.' | ',' | '!' | '?' | ';' | ':' | '"' | '(' | ')' | '[' | ']' | '~'
    )
}

/// Splits on whitespace and `_`, and cuts punctuation into its own tokens.
/// `"written_by"` gives `["written", "by"]`; `"Melville."` gives
/// `["Melville", "."]`.
pub fn words(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for chunk in text.split(|c: char| c.is_whitespace() || c == '_') {
        let mut start = 0;
        for (i, c) in chunk.char_indices() {
            if is_split_punct(c) {
                if start < i {
                    out.push(&chunk[start..i]);
                }
                out.push(&chunk[i..i + c.len_utf8()]);
                start = i + c.len_utf8();
            }
        }
        if start < chunk.len() {
            out.push(&chunk[start..]);
        }
    }
    out
}

/// Bijective token ↔ id map; ids 0–3 are PAD/UNK/BOS/EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    fn with_reserved() -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Self { tokens, index }
    }

    /// Vocabulary over every word of `texts`, in sorted order after the
    /// reserved ids.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<&str> = texts.into_iter().flat_map(words).collect();
        let mut v = Self::with_reserved();
        for w in set {
            v.push(w);
        }
        v
    }

    fn push(&mut self, w: &str) {
        if !self.index.contains_key(w) {
            self.index.insert(w.to_string(), self.tokens.len() as TokenId);
            self.tokens.push(w.to_string());
        }
    }

    /// One token per line; line number is the id.
    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() {
            return Err(Error::Empty("vocabulary without reserved tokens".into()));
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if lines[i] != *r {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected reserved token {r}"),
                });
            }
        }
        let mut v = Self::with_reserved();
        for (i, line) in lines.iter().enumerate().skip(RESERVED.len()) {
            if line.is_empty() || v.index.contains_key(*line) {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("empty or duplicate token `{line}`"),
                });
            }
            v.push(line);
        }
        Ok(v)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> TokenId {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens
            .get(id as usize)
            .map_or(RESERVED[UNK as usize], |s| s.as_str())
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        words(text).into_iter().map(|w| self.id(w)).collect()
    }

    /// Space-joined tokens, reserved ids dropped.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&i| i > EOS)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_words_and_punctuation() {
        assert_eq!(words("New York"), vec!["New", "York"]);
        assert_eq!(words("written_by"), vec!["written", "by"]);
        assert_eq!(words("~written_by"), vec!["~", "written", "by"]);
        assert_eq!(
            words("Melville. Really?"),
            vec!["Melville", ".", "Really", "?"]
        );
        assert_eq!(words("  "), Vec::<&str>::new());
    }

    #[test]
    fn reserved_ids_and_unk() {
        let v = Vocab::build(["hello world", "world"]);
        assert_eq!(v.len(), 6);
        assert_eq!(v.token(PAD), "<pad>");
        assert_eq!(v.id("world"), 5);
        assert_eq!(v.id("missing"), UNK);
        assert_eq!(v.decode(&[BOS, 4, 5, EOS]), "hello world");
    }

    #[test]
    fn file_round_trip() {
        let v = Vocab::build(["a b c"]);
        assert_eq!(Vocab::parse(&v.to_text()).unwrap(), v);
        assert!(Vocab::parse("<pad>\n<unk>\n").is_err());
        assert!(Vocab::parse("<pad>\n<unk>\n<bos>\n<eos>\nx\nx\n").is_err());
    }
}
