//! Word-level tokenizer, vocabulary construction, and report encoding.
//!
//! Tokens are lowercase alphanumeric runs; the punctuation marks `. , ; : ( ) /`
//! become single-character tokens; everything else separates. The canonical
//! form of a text is its tokens joined by single spaces.

use std::collections::HashMap;

use thiserror::Error;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

const PUNCT: [char; 7] = ['.', ',', ';', ':', '(', ')', '/'];

#[derive(Debug, Error)]
pub enum TextError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("vocabulary file is malformed: {message}")]
    MalformedVocab { message: String },
}

/// Split a report into word-level tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        let c = ch.to_ascii_lowercase();
        if c.is_ascii_alphanumeric() {
            word.push(c);
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if PUNCT.contains(&c) {
                tokens.push(c.to_string());
            }
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Tokens joined by single spaces: the normal form round-tripped by
/// encode/decode.
pub fn canonical(text: &str) -> String {
    tokenize(text).join(" ")
}

/// Token table with fixed sentinel ids: PAD=0, BOS=1, EOS=2, UNK=3.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

impl Vocabulary {
    /// Count word tokens over the corpus and keep those with
    /// `count >= min_count`, ordered by descending frequency then
    /// lexicographically.
    pub fn build(corpus: &[String], min_count: usize) -> Result<Self, TextError> {
        assert!(min_count >= 1, "min_count must be at least 1");
        if corpus.is_empty() {
            return Err(TextError::EmptyCorpus);
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for token in tokenize(text) {
                *counts.entry(token).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(kept.into_iter().map(|(t, _)| t));
        Ok(Self::from_tokens(id_to_token))
    }

    fn from_tokens(id_to_token: Vec<String>) -> Self {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            id_to_token,
            token_to_id,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // sentinels are always present
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Result<&str, TextError> {
        self.id_to_token
            .get(id as usize)
            .map(|s| s.as_str())
            .ok_or(TextError::IdOutOfRange {
                id,
                size: self.id_to_token.len(),
            })
    }

    /// JSON array of tokens in id order (sentinels included).
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.id_to_token).expect("vocab serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, TextError> {
        let tokens: Vec<String> =
            serde_json::from_str(json).map_err(|e| TextError::MalformedVocab {
                message: e.to_string(),
            })?;
        if tokens.len() < RESERVED.len()
            || tokens[..RESERVED.len()] != RESERVED.map(str::to_string)
        {
            return Err(TextError::MalformedVocab {
                message: format!("first four ids must be {RESERVED:?}"),
            });
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// Integer-encoded report.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSequence { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Generated tokens, not counting the BOS prefix.
    pub fn generated_len(&self) -> usize {
        self.ids.iter().filter(|&&id| id != BOS).count()
    }
}

/// BOS + token ids (UNK for out-of-vocabulary words) + EOS.
pub fn encode_report(text: &str, vocab: &Vocabulary) -> TokenSequence {
    let mut ids = vec![BOS];
    ids.extend(tokenize(text).iter().map(|t| vocab.id(t)));
    ids.push(EOS);
    TokenSequence::new(ids)
}

/// Inverse of [`encode_report`] up to canonicalization: skips PAD and BOS,
/// stops at the first EOS.
pub fn decode_tokens(seq: &TokenSequence, vocab: &Vocabulary) -> Result<String, TextError> {
    let mut words = Vec::new();
    for &id in &seq.ids {
        if id == EOS {
            break;
        }
        if id == PAD || id == BOS {
            continue;
        }
        words.push(vocab.token(id)?.to_string());
    }
    Ok(words.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizes_report_sentence() {
        let tokens = tokenize("Trachea, both main bronchi are open.");
        assert_eq!(
            tokens,
            vec!["trachea", ",", "both", "main", "bronchi", "are", "open", "."]
        );
    }

    #[test]
    fn vocab_frequency_then_lexicographic_order() {
        let corpus = vec!["a b".to_string(), "a".to_string()];
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        assert_eq!(vocab.id("a"), 4);
        assert_eq!(vocab.id("b"), 5);
        assert_eq!(vocab.len(), 6);
    }

    #[test]
    fn min_count_prunes_to_unk() {
        let corpus = vec!["a b".to_string(), "a".to_string()];
        let vocab = Vocabulary::build(&corpus, 2).unwrap();
        assert_eq!(vocab.id("a"), 4);
        assert_eq!(vocab.id("b"), UNK);
        assert_eq!(vocab.len(), 5);
    }

    #[test]
    fn empty_corpus_is_error() {
        assert!(matches!(
            Vocabulary::build(&[], 1),
            Err(TextError::EmptyCorpus)
        ));
    }

    #[test]
    fn encode_basics() {
        let corpus = vec!["a".to_string()];
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        assert_eq!(encode_report("", &vocab).ids, vec![BOS, EOS]);
        assert_eq!(encode_report("a", &vocab).ids, vec![BOS, 4, EOS]);
        assert_eq!(encode_report("zzz", &vocab).ids, vec![BOS, UNK, EOS]);
    }

    #[test]
    fn decode_skips_pad_stops_at_eos() {
        let corpus = vec!["a b".to_string()];
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        let a = vocab.id("a");
        let b = vocab.id("b");
        let seq = TokenSequence::new(vec![BOS, a, b, EOS, b, PAD, PAD]);
        assert_eq!(decode_tokens(&seq, &vocab).unwrap(), "a b");
        assert_eq!(
            decode_tokens(&TokenSequence::new(vec![BOS, EOS]), &vocab).unwrap(),
            ""
        );
    }

    #[test]
    fn decode_rejects_out_of_range() {
        let corpus = vec!["a".to_string()];
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        let seq = TokenSequence::new(vec![BOS, 999, EOS]);
        assert!(matches!(
            decode_tokens(&seq, &vocab),
            Err(TextError::IdOutOfRange { .. })
        ));
    }

    #[test]
    fn round_trip_is_canonical_identity() {
        let corpus = vec![
            "Trachea, both main bronchi are open.".to_string(),
            "No pleural effusion.".to_string(),
        ];
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        for text in &corpus {
            let seq = encode_report(text, &vocab);
            assert_eq!(decode_tokens(&seq, &vocab).unwrap(), canonical(text));
        }
    }

    #[test]
    fn vocab_bytes_deterministic() {
        let corpus = vec![
            "the heart is enlarged .".to_string(),
            "the lungs are clear .".to_string(),
        ];
        let a = Vocabulary::build(&corpus, 1).unwrap().to_json();
        let b = Vocabulary::build(&corpus, 1).unwrap().to_json();
        assert_eq!(a, b);
        let restored = Vocabulary::from_json(&a).unwrap();
        assert_eq!(restored.to_json(), a);
    }

    #[test]
    fn vocab_json_requires_sentinels() {
        assert!(Vocabulary::from_json("[\"a\",\"b\"]").is_err());
        assert!(Vocabulary::from_json("not json").is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn sentence() -> impl Strategy<Value = String> {
            // Words over the tokenizer's alphabet plus punctuation and noise.
            proptest::collection::vec("[a-z]{1,8}|[0-9]{1,3}|[.,;:()/]", 1..12)
                .prop_map(|parts| parts.join(" "))
        }

        proptest! {
            #[test]
            fn round_trip_decodes_to_canonical(text in sentence()) {
                let vocab = Vocabulary::build(std::slice::from_ref(&text), 1).unwrap();
                let seq = encode_report(&text, &vocab);
                prop_assert_eq!(decode_tokens(&seq, &vocab).unwrap(), canonical(&text));
            }

            #[test]
            fn encode_brackets_with_bos_eos(text in sentence()) {
                let vocab = Vocabulary::build(std::slice::from_ref(&text), 1).unwrap();
                let seq = encode_report(&text, &vocab);
                prop_assert_eq!(seq.ids[0], BOS);
                prop_assert_eq!(*seq.ids.last().unwrap(), EOS);
                prop_assert_eq!(seq.ids.iter().filter(|&&t| t == BOS).count(), 1);
            }

            #[test]
            fn canonical_is_idempotent(text in sentence()) {
                let once = canonical(&text);
                prop_assert_eq!(canonical(&once), once.clone());
            }
        }
    }
}
