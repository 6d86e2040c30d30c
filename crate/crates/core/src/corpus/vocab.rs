use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::AnnotatedSentence;
use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;

pub type TokenId = usize;

/// Word vocabulary with the five reserved specials at ids 0..=4.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub const PAD: TokenId = 0;
    pub const UNK: TokenId = 1;
    pub const CLS: TokenId = 2;
    pub const SEP: TokenId = 3;
    pub const MASK: TokenId = 4;
    pub const SPECIALS: [&'static str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
    pub const NUM_SPECIALS: usize = 5;

    /// Builds a vocabulary from non-special words in id order.
    pub fn from_words(words: impl IntoIterator<Item = String>) -> Self {
        let mut tokens: Vec<String> = Self::SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().filter(|w| !Self::is_special_literal(w)));
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    /// Case-insensitive: `[mask]` in raw text is still the mask literal.
    pub fn is_special_literal(word: &str) -> bool {
        Self::SPECIALS.iter().any(|s| s.eq_ignore_ascii_case(word))
    }

    pub fn is_special(id: TokenId) -> bool {
        id < Self::NUM_SPECIALS
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    pub fn words(&self) -> &[String] {
        &self.tokens[Self::NUM_SPECIALS..]
    }

    pub fn normalize(word: &str) -> String {
        word.to_lowercase()
    }

    /// Id of a raw word: lowercased, with special literals and OOV words
    /// mapped to `[UNK]`.
    pub fn id(&self, word: &str) -> TokenId {
        let w = Self::normalize(word);
        if Self::is_special_literal(&w) {
            return Self::UNK;
        }
        self.index.get(&w).copied().unwrap_or(Self::UNK)
    }

    pub fn ids<'a>(&self, words: impl IntoIterator<Item = &'a str>) -> Vec<TokenId> {
        words.into_iter().map(|w| self.id(w)).collect()
    }

    /// Body ids of a whitespace-separated text.
    pub fn encode_text(&self, text: &str) -> Vec<TokenId> {
        self.ids(text.split_whitespace())
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        Self::from_words(tokens.into_iter().skip(Self::NUM_SPECIALS))
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// Vocabulary over corpus tokens, synonym tokens and relation-name tokens
/// seen at least `min_freq` times, ordered by descending frequency then
/// lexicographically.
pub fn build_vocab(
    corpus: &[AnnotatedSentence],
    kg: &KnowledgeGraph,
    min_freq: usize,
) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("cannot build a vocabulary from an empty corpus".into()));
    }
    if min_freq == 0 {
        return Err(Error::InvalidInput("min_freq must be at least 1".into()));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut add = |w: &str| {
        let w = Vocabulary::normalize(w);
        if !Vocabulary::is_special_literal(&w) {
            *counts.entry(w).or_default() += 1;
        }
    };
    for s in corpus {
        s.tokens.iter().for_each(|t| add(t));
    }
    for v in 0..kg.num_nodes() {
        for name in kg.synonyms(v) {
            name.split_whitespace().for_each(&mut add);
        }
    }
    for r in 0..kg.num_relations() {
        kg.relation_name(r).split_whitespace().for_each(&mut add);
    }
    let mut words: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(Vocabulary::from_words(words.into_iter().map(|(w, _)| w)))
}

/// Mention span over encoded positions (already shifted past `[CLS]`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedMention {
    pub start: usize,
    pub end: usize,
    pub concept: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSentence {
    pub ids: Vec<TokenId>,
    pub mentions: Vec<EncodedMention>,
}

/// `[CLS] body [SEP]` with the body truncated to `max_len - 2`; mentions
/// that do not fit entirely are dropped.
pub fn encode(sentence: &AnnotatedSentence, vocab: &Vocabulary, max_len: usize) -> EncodedSentence {
    assert!(max_len >= 3, "max_len must leave room for one body token");
    let body = sentence.tokens.len().min(max_len - 2);
    let mut ids = Vec::with_capacity(body + 2);
    ids.push(Vocabulary::CLS);
    ids.extend(sentence.tokens[..body].iter().map(|t| vocab.id(t)));
    ids.push(Vocabulary::SEP);
    let mentions = sentence
        .mentions
        .iter()
        .filter(|m| m.end() <= body)
        .map(|m| EncodedMention {
            start: m.start() + 1,
            end: m.end() + 1,
            concept: m.concept().to_string(),
        })
        .collect();
    EncodedSentence { ids, mentions }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Mention;
    use proptest::prelude::*;

    fn sent(words: &[&str]) -> AnnotatedSentence {
        AnnotatedSentence {
            tokens: words.iter().map(|w| w.to_string()).collect(),
            mentions: vec![],
        }
    }

    fn empty_kg() -> KnowledgeGraph {
        KnowledgeGraph::load(&b""[..], &b""[..], None::<&[u8]>).unwrap()
    }

    #[test]
    fn frequency_filter() {
        let corpus = vec![sent(&["a", "b"]), sent(&["a", "c"])];
        let v = build_vocab(&corpus, &empty_kg(), 2).unwrap();
        assert_eq!(v.words(), ["a"]);
    }

    #[test]
    fn ordering_rule() {
        let corpus = vec![sent(&["a", "b"]), sent(&["a", "c"])];
        let v = build_vocab(&corpus, &empty_kg(), 1).unwrap();
        assert_eq!(v.id("a"), 5);
        assert_eq!(v.id("b"), 6);
        assert_eq!(v.id("c"), 7);
    }

    #[test]
    fn includes_kg_names_and_relations() {
        let kg = KnowledgeGraph::load(
            &br#"{"head":"A","rel":"r","tail":"A"}"#[..],
            &br#"{"id":"A","names":["Big Pain"]}"#[..],
            Some(&br#"{"rel":"r","name":"causes"}"#[..]),
        )
        .unwrap();
        let v = build_vocab(&[sent(&["x"])], &kg, 1).unwrap();
        for w in ["big", "pain", "causes", "x"] {
            assert_ne!(v.id(w), Vocabulary::UNK, "{w}");
        }
    }

    #[test]
    fn empty_corpus_is_error() {
        assert!(build_vocab(&[], &empty_kg(), 1).is_err());
    }

    #[test]
    fn mask_literal_never_maps_to_mask_id() {
        let corpus = vec![sent(&["[MASK]", "a"])];
        let v = build_vocab(&corpus, &empty_kg(), 1).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("[MASK]"), Vocabulary::UNK);
        let e = encode(&corpus[0], &v, 8);
        assert!(!e.ids.contains(&Vocabulary::MASK));
    }

    #[test]
    fn encode_offsets_mentions() {
        let mut s = sent(&["aspirin", "treats", "pain"]);
        s.mentions.push(Mention(0, 1, "A".into()));
        let v = build_vocab(&[s.clone()], &empty_kg(), 1).unwrap();
        let e = encode(&s, &v, 8);
        assert_eq!(
            e.ids,
            vec![Vocabulary::CLS, v.id("aspirin"), v.id("treats"), v.id("pain"), Vocabulary::SEP]
        );
        assert_eq!((e.mentions[0].start, e.mentions[0].end), (1, 2));
    }

    #[test]
    fn encode_truncates_and_drops_mentions() {
        let mut s = sent(&["aspirin", "treats", "pain"]);
        s.mentions.push(Mention(0, 1, "A".into()));
        s.mentions.push(Mention(2, 3, "B".into()));
        let v = build_vocab(&[s.clone()], &empty_kg(), 1).unwrap();
        let e = encode(&s, &v, 4);
        assert_eq!(e.ids.len(), 4);
        assert_eq!(e.mentions.len(), 1);
        assert_eq!(e.mentions[0].concept, "A");
    }

    #[test]
    fn all_oov_maps_to_unk() {
        let v = build_vocab(&[sent(&["a"])], &empty_kg(), 1).unwrap();
        let e = encode(&sent(&["zz", "yy"]), &v, 8);
        assert_eq!(&e.ids[1..3], &[Vocabulary::UNK, Vocabulary::UNK]);
    }

    #[test]
    fn vocab_serde_roundtrip() {
        let v = build_vocab(&[sent(&["b", "a", "a"])], &empty_kg(), 1).unwrap();
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(v, back);
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(words in proptest::collection::vec("[a-zA-Z]{1,6}", 1..20), max_len in 3usize..30) {
            let s = sent(&words.iter().map(|w| w.as_str()).collect::<Vec<_>>());
            let v = build_vocab(&[s.clone()], &empty_kg(), 1).unwrap();
            let e = encode(&s, &v, max_len);
            let body = &e.ids[1..e.ids.len() - 1];
            let expected: Vec<String> = words.iter().take(max_len - 2).map(|w| w.to_lowercase()).collect();
            prop_assert_eq!(v.decode(body), expected);
            for m in &e.mentions {
                prop_assert!(m.start >= 1 && m.end <= e.ids.len() - 1);
            }
        }
    }
}
