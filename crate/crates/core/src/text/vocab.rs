use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
const RESERVED: [&str; 3] = ["[PAD]", "[UNK]", "[CLS]"];

/// Lowercased word tokens. Whitespace and punctuation separate words, except
/// that underscores join words and a period between two digits stays inside
/// a number (`0.5`).
pub fn split_words(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.to_lowercase().chars().collect();
    let mut words = Vec::new();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        let decimal_point = c == '.'
            && i > 0
            && chars[i - 1].is_ascii_digit()
            && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit())
            && !current.is_empty();
        if c.is_alphanumeric() || c == '_' || decimal_point {
            current.push(c);
        } else if !current.is_empty() {
            words.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

/// Word vocabulary with reserved ids `[PAD]=0`, `[UNK]=1`, `[CLS]=2`,
/// followed by tokens in descending frequency (ties lexicographic).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn build<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Validation(
                "cannot build a vocabulary from an empty corpus".into(),
            ));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for doc in corpus {
            for w in split_words(doc.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_freq.max(1) && !RESERVED.contains(&w.as_str()))
            .collect();
        // BTreeMap iteration is already lexicographic; a stable sort keeps it for ties.
        ranked.sort_by_key(|r| std::cmp::Reverse(r.1));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(w, _)| w))
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    /// Parses the one-token-per-line form; line number is the id.
    pub fn from_lines(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < RESERVED.len() || tokens[..3] != RESERVED {
            return Err(Error::Validation(
                "vocabulary must start with [PAD], [UNK], [CLS]".into(),
            ));
        }
        let vocab = Self::from_tokens(tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::Validation("vocabulary contains duplicate tokens".into()));
        }
        Ok(vocab)
    }

    pub fn to_lines(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_lines()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_lines(&text)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Space-joined tokens, skipping `[PAD]` and `[CLS]`.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD_ID && i != CLS_ID)
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// `[CLS]` + word ids (unknown → `[UNK]`), truncated from the end to
/// `m_max` and padded with `[PAD]`. The mask is true on non-pad positions.
pub fn tokenize(raw_text: &str, vocab: &Vocabulary, m_max: usize) -> Result<(Vec<usize>, Vec<bool>)> {
    if m_max < 1 {
        return Err(Error::Config("M_max must be at least 1".into()));
    }
    let mut ids = Vec::with_capacity(m_max);
    ids.push(CLS_ID);
    ids.extend(
        split_words(raw_text)
            .iter()
            .map(|w| vocab.id(w).unwrap_or(UNK_ID))
            .take(m_max - 1),
    );
    let real = ids.len();
    ids.resize(m_max, PAD_ID);
    let mask = (0..m_max).map(|i| i < real).collect();
    Ok((ids, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn frequency_order_and_min_freq() {
        let v = Vocabulary::build(&["a a b"], 1).unwrap();
        assert_eq!(v.tokens(), &["[PAD]", "[UNK]", "[CLS]", "a", "b"]);
        let v2 = Vocabulary::build(&["a a b"], 2).unwrap();
        assert_eq!(v2.tokens(), &["[PAD]", "[UNK]", "[CLS]", "a"]);
        assert_eq!(Vocabulary::build(&["a a b"], 1).unwrap(), v);
        let ties = Vocabulary::build(&["zeta alpha mid"], 1).unwrap();
        assert_eq!(&ties.tokens()[3..], &["alpha", "mid", "zeta"]);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let empty: [&str; 0] = [];
        assert!(Vocabulary::build(&empty, 1).is_err());
    }

    #[test]
    fn splitting_rules() {
        assert_eq!(
            split_words("CDR 0.5. Notes: phosphorylated_tau, G-protein."),
            vec!["cdr", "0.5", "notes", "phosphorylated_tau", "g", "protein"]
        );
    }

    #[test]
    fn tokenize_edge_cases() {
        let v = Vocabulary::build(&["age seventy"], 1).unwrap();
        let (ids, mask) = tokenize("", &v, 4).unwrap();
        assert_eq!(ids, vec![CLS_ID, PAD_ID, PAD_ID, PAD_ID]);
        assert_eq!(mask, vec![true, false, false, false]);

        let (ids, mask) = tokenize("age seventy age seventy age", &v, 3).unwrap();
        assert_eq!(ids.len(), 3);
        assert_eq!(ids, vec![CLS_ID, v.id("age").unwrap(), v.id("seventy").unwrap()]);
        assert!(mask.iter().all(|&m| m));

        let (ids, _) = tokenize("banana", &v, 3).unwrap();
        assert_eq!(ids[1], UNK_ID);

        assert!(matches!(tokenize("x", &v, 0), Err(Error::Config(_))));
    }

    #[test]
    fn line_format_round_trip() {
        let v = Vocabulary::build(&["b a a c_d"], 1).unwrap();
        let back = Vocabulary::from_lines(&v.to_lines()).unwrap();
        assert_eq!(back, v);
        assert!(Vocabulary::from_lines("a\nb\n").is_err());
    }

    proptest! {
        #[test]
        fn tokenize_then_detokenize_round_trips(words in prop::collection::vec("[a-zA-Z_][a-zA-Z0-9_]{0,6}", 0..12)) {
            let text = words.join(", ");
            let v = Vocabulary::build(&[text.as_str(), "filler"], 1).unwrap();
            let (ids, mask) = tokenize(&text, &v, words.len() + 1).unwrap();
            prop_assert_eq!(mask.iter().filter(|&&m| m).count(), words.len() + 1);
            let back = v.detokenize(&ids);
            prop_assert_eq!(back, words.iter().map(|w| w.to_lowercase()).collect::<Vec<_>>().join(" "));
        }
    }
}
