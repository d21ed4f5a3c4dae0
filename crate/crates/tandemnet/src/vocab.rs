//! Vocabulary and report tokenization. Index 0..=4 are reserved control
//! tokens; corpus words start at 5 and stay dense.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
/// Marks the end of each sentence; the text encoder reads its hidden state
/// at these positions.
pub const SENT_END: u32 = 2;
pub const BOS: u32 = 3;
pub const EOS: u32 = 4;

pub const RESERVED: [&str; 5] = ["<pad>", "<unk>", "</s>", "<bos>", "<eos>"];

/// Lowercases and splits on anything non-alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut v = Vocabulary { tokens: Vec::new(), index: HashMap::new() };
        for t in RESERVED {
            v.add(t);
        }
        v
    }

    /// Inserts the token if new; returns its index either way.
    pub fn add(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Lookup with `<unk>` fallback.
    pub fn id(&self, token: &str) -> u32 {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(t);
            out.push('\t');
            out.push_str(&i.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut tokens: Vec<String> = Vec::new();
        let mut index = HashMap::new();
        let mut offset = 0u64;
        for line in text.split('\n') {
            let line_start = offset;
            offset += line.len() as u64 + 1;
            if line.is_empty() {
                continue;
            }
            let (tok, idx) = line
                .split_once('\t')
                .ok_or_else(|| Error::format(line_start, format!("missing tab in vocabulary line {line:?}")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::format(line_start, format!("bad vocabulary index {idx:?}")))?;
            if idx != tokens.len() {
                return Err(Error::format(
                    line_start,
                    format!("vocabulary indices must be dense and ordered; expected {}, got {idx}", tokens.len()),
                ));
            }
            if index.insert(tok.to_string(), idx as u32).is_some() {
                return Err(Error::format(line_start, format!("duplicate vocabulary token {tok:?}")));
            }
            tokens.push(tok.to_string());
        }
        for (i, want) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(want) {
                return Err(Error::format(0, format!("reserved token {want:?} missing at index {i}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }
}

/// A report as token indices plus the positions of its sentence-end markers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedReport {
    pub tokens: Vec<u32>,
    pub sentence_ends: Vec<usize>,
}

impl TokenizedReport {
    pub fn new(tokens: Vec<u32>, sentence_ends: Vec<usize>) -> Result<Self> {
        let mut prev = None;
        for &p in &sentence_ends {
            if p >= tokens.len() {
                return Err(Error::input(format!("sentence-end position {p} beyond report length {}", tokens.len())));
            }
            if tokens[p] != SENT_END {
                return Err(Error::input(format!("token at sentence-end position {p} is not the marker")));
            }
            if prev.is_some_and(|q| p <= q) {
                return Err(Error::input("sentence-end positions must be strictly increasing".to_string()));
            }
            prev = Some(p);
        }
        let markers = tokens.iter().filter(|&&t| t == SENT_END).count();
        if markers != sentence_ends.len() {
            return Err(Error::input(format!(
                "{markers} sentence-end markers in tokens but {} positions listed",
                sentence_ends.len()
            )));
        }
        Ok(TokenizedReport { tokens, sentence_ends })
    }

    /// Builds `<bos> w.. </s> w.. </s> ... <eos>`, growing the vocabulary.
    pub fn from_sentences(vocab: &mut Vocabulary, sentences: &[Vec<String>]) -> Self {
        let mut tokens = vec![BOS];
        let mut sentence_ends = Vec::with_capacity(sentences.len());
        for sentence in sentences {
            for w in sentence {
                tokens.push(vocab.add(w));
            }
            sentence_ends.push(tokens.len());
            tokens.push(SENT_END);
        }
        tokens.push(EOS);
        TokenizedReport { tokens, sentence_ends }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_tokens_sit_at_fixed_indices() {
        let v = Vocabulary::new();
        assert_eq!(v.get("<pad>"), Some(PAD));
        assert_eq!(v.get("<unk>"), Some(UNK));
        assert_eq!(v.get("</s>"), Some(SENT_END));
        assert_eq!(v.get("<bos>"), Some(BOS));
        assert_eq!(v.get("<eos>"), Some(EOS));
        assert_eq!(v.len(), 5);
    }

    #[test]
    fn add_is_idempotent_and_dense() {
        let mut v = Vocabulary::new();
        let a = v.add("nuclei");
        let b = v.add("crowding");
        assert_eq!((a, b), (5, 6));
        assert_eq!(v.add("nuclei"), 5);
        assert_eq!(v.len(), 7);
        assert_eq!(v.token(6), Some("crowding"));
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = Vocabulary::new();
        assert_eq!(v.id("mitochondria"), UNK);
    }

    #[test]
    fn tsv_round_trip_is_exact() {
        let mut v = Vocabulary::new();
        v.add("marked");
        v.add("pleomorphism");
        let text = v.to_tsv();
        let back = Vocabulary::from_tsv(&text).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn tsv_gap_reports_byte_offset() {
        let text = "<pad>\t0\n<unk>\t1\n</s>\t2\n<bos>\t3\n<eos>\t4\nword\t9\n";
        let err = Vocabulary::from_tsv(text).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, 39),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn tsv_missing_tab_is_a_format_error() {
        assert!(matches!(Vocabulary::from_tsv("<pad> 0\n"), Err(Error::Format { .. })));
    }

    #[test]
    fn tokenize_lowercases_and_splits_punctuation() {
        assert_eq!(tokenize("Marked pleomorphism, with crowding."), ["marked", "pleomorphism", "with", "crowding"]);
    }

    #[test]
    fn from_sentences_places_markers() {
        let mut v = Vocabulary::new();
        let r = TokenizedReport::from_sentences(
            &mut v,
            &[vec!["a".into(), "b".into()], vec!["c".into()]],
        );
        assert_eq!(r.tokens[0], BOS);
        assert_eq!(*r.tokens.last().unwrap(), EOS);
        assert_eq!(r.sentence_ends, vec![3, 5]);
        for &p in &r.sentence_ends {
            assert_eq!(r.tokens[p], SENT_END);
        }
        // Structure is internally consistent per the constructor's rules.
        TokenizedReport::new(r.tokens.clone(), r.sentence_ends.clone()).unwrap();
    }

    #[test]
    fn constructor_rejects_bad_marker_positions() {
        assert!(TokenizedReport::new(vec![BOS, 5, EOS], vec![1]).is_err());
        assert!(TokenizedReport::new(vec![BOS, SENT_END, EOS], vec![5]).is_err());
        assert!(TokenizedReport::new(vec![BOS, SENT_END, SENT_END], vec![2, 1]).is_err());
        assert!(TokenizedReport::new(vec![BOS, SENT_END, SENT_END], vec![1]).is_err());
    }
}
