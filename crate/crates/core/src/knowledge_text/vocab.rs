use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use super::TextError;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const UNK: usize = 3;
pub const NUM_RESERVED: usize = 4;

const DEFAULT_NOUNS: &str = include_str!("../../data/nouns.txt");
const DEFAULT_EXCEPTIONS: &str = include_str!("../../data/plural_exceptions.tsv");

/// Lowercase alphanumeric word pieces; every other character separates.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_ascii_lowercase)
        .collect()
}

/// Token ids plus the noun lexicon used for keyword extraction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    tokens: Vec<String>,
    noun_lexicon: HashSet<String>,
    plural_exceptions: HashMap<String, String>,
}

impl Vocabulary {
    /// Empty vocabulary carrying the shipped noun list and plural exceptions.
    pub fn with_default_lexicon() -> Self {
        let mut v = Self::default();
        v.extend_lexicon(DEFAULT_NOUNS.lines());
        v.plural_exceptions =
            parse_exceptions(DEFAULT_EXCEPTIONS).expect("shipped exception table");
        v
    }

    /// Adds a token if absent and returns its id.
    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.token_to_id.get(token) {
            return id;
        }
        let id = NUM_RESERVED + self.tokens.len();
        self.tokens.push(token.to_string());
        self.token_to_id.insert(token.to_string(), id);
        id
    }

    /// Adds every token of every text, in first-occurrence order.
    pub fn add_texts<'a>(&mut self, texts: impl IntoIterator<Item = &'a str>) {
        for t in texts {
            for tok in tokenize(t) {
                self.insert(&tok);
            }
        }
    }

    /// Adds nouns (single or multi-word, already lowercase) to the lexicon
    /// and their word pieces to the token table.
    pub fn extend_lexicon<'a>(&mut self, nouns: impl IntoIterator<Item = &'a str>) {
        for n in nouns {
            let n = n.trim();
            if n.is_empty() {
                continue;
            }
            self.noun_lexicon.insert(n.to_string());
            for tok in tokenize(n) {
                self.insert(&tok);
            }
        }
    }

    pub fn set_plural_exceptions(&mut self, exceptions: HashMap<String, String>) {
        self.plural_exceptions = exceptions;
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        match id {
            PAD => Some("[PAD]"),
            CLS => Some("[CLS]"),
            SEP => Some("[SEP]"),
            UNK => Some("[UNK]"),
            _ => self.tokens.get(id - NUM_RESERVED).map(String::as_str),
        }
    }

    /// Total ids including the reserved ones.
    pub fn len(&self) -> usize {
        NUM_RESERVED + self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_noun(&self, word: &str) -> bool {
        self.noun_lexicon.contains(word)
    }

    pub fn noun_lexicon(&self) -> &HashSet<String> {
        &self.noun_lexicon
    }

    pub fn plural_exception(&self, word: &str) -> Option<&str> {
        self.plural_exceptions.get(word).map(String::as_str)
    }

    /// One token per line; line `i` (0-based) holds id `i + 4`.
    pub fn tokens_to_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn save_tokens(&self, path: &Path) -> Result<(), TextError> {
        fs::write(path, self.tokens_to_string())?;
        Ok(())
    }

    /// Replaces the token table from a token file, keeping the lexicon.
    pub fn load_tokens(&mut self, path: &Path) -> Result<(), TextError> {
        self.set_tokens_from_str(&fs::read_to_string(path)?)
    }

    pub fn set_tokens_from_str(&mut self, text: &str) -> Result<(), TextError> {
        self.tokens.clear();
        self.token_to_id.clear();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() || self.token_to_id.contains_key(line) {
                return Err(TextError::BadVocabulary {
                    line_no: i + 1,
                    reason: "empty or duplicate token".into(),
                });
            }
            self.insert(line);
        }
        Ok(())
    }

    pub fn load_lexicon(&mut self, path: &Path) -> Result<(), TextError> {
        let text = fs::read_to_string(path)?;
        self.extend_lexicon(text.lines());
        Ok(())
    }

    pub fn load_plural_exceptions(&mut self, path: &Path) -> Result<(), TextError> {
        self.plural_exceptions = parse_exceptions(&fs::read_to_string(path)?)?;
        Ok(())
    }
}

fn parse_exceptions(text: &str) -> Result<HashMap<String, String>, TextError> {
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((plural, singular)) = line.split_once('\t') else {
            return Err(TextError::BadVocabulary {
                line_no: i + 1,
                reason: "expected plural<TAB>singular".into(),
            });
        };
        out.insert(plural.trim().to_string(), singular.trim().to_string());
    }
    Ok(out)
}

/// `[CLS] tokens… [SEP]`, truncated to `max_len` (keeping the final SEP)
/// and right-padded with PAD. Unknown tokens map to UNK.
pub fn encode_tokens(text: &str, vocab: &Vocabulary, max_len: usize) -> Vec<usize> {
    assert!(max_len >= 2, "max_len must leave room for CLS and SEP");
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(tokenize(text).iter().take(max_len - 2).map(|t| vocab.id(t)));
    ids.push(SEP);
    ids.resize(max_len, PAD);
    ids
}

/// Joins caption ids and knowledge ids (both from [`encode_tokens`]) as
/// `[CLS] caption [SEP] knowledge [SEP]`, truncated to `max_len` with a
/// final SEP, then padded. An empty knowledge sentence leaves the caption
/// unchanged.
pub fn join_pair_ids(caption_ids: &[usize], knowledge_ids: &[usize], max_len: usize) -> Vec<usize> {
    assert!(max_len >= 2, "max_len must leave room for CLS and SEP");
    let content = |ids: &[usize]| -> Vec<usize> {
        ids.iter()
            .copied()
            .filter(|&i| i != PAD && i != CLS && i != SEP)
            .collect()
    };
    let cap = content(caption_ids);
    let know = content(knowledge_ids);
    let mut ids = vec![CLS];
    ids.extend(&cap);
    if !know.is_empty() {
        ids.push(SEP);
        ids.extend(&know);
    }
    ids.truncate(max_len - 1);
    ids.push(SEP);
    ids.resize(max_len, PAD);
    ids
}

/// Number of leading non-PAD ids.
pub fn unpadded_len(ids: &[usize]) -> usize {
    ids.iter().rposition(|&i| i != PAD).map_or(0, |p| p + 1)
}
