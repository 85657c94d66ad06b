//! From caption to knowledge sentence: keyword extraction, one-step triplet
//! retrieval, triplet selection, verbalization, and token encoding.

mod keywords;
mod selection;
mod sentence;
mod vocab;

pub use keywords::{extract_keywords, singularize};
pub use selection::{select_triplets, token_jaccard, SelectionStrategy};
pub use sentence::{
    build_knowledge_sentence, relation_template, triplet_to_sentence, RELATION_TEMPLATES,
};
pub use vocab::{
    encode_tokens, join_pair_ids, tokenize, unpadded_len, Vocabulary, CLS, NUM_RESERVED, PAD, SEP,
    UNK,
};

use serde::{Deserialize, Serialize};

use crate::kg::{KnowledgeGraph, Triplet};

#[derive(Debug, thiserror::Error)]
pub enum TextError {
    #[error("m must be at least 1")]
    InvalidM,
    #[error("vocabulary line {line_no}: {reason}")]
    BadVocabulary { line_no: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Every triplet adjacent to one of the keywords, in graph order.
pub fn retrieve_triplets<S: AsRef<str>>(keywords: &[S], graph: &KnowledgeGraph) -> Vec<Triplet> {
    graph.one_step_neighbors(keywords)
}

/// A caption together with the knowledge mined for it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextSample {
    pub caption: String,
    pub keywords: Vec<String>,
    pub triplets: Vec<Triplet>,
    pub knowledge_sentence: String,
    pub caption_ids: Vec<usize>,
    pub knowledge_ids: Vec<usize>,
}

/// Settings for turning captions into [`TextSample`]s.
#[derive(Clone, Debug)]
pub struct KnowledgeExpander<'a> {
    pub vocab: &'a Vocabulary,
    /// `None` disables knowledge: every sample gets an empty sentence.
    pub graph: Option<&'a KnowledgeGraph>,
    pub m: usize,
    pub strategy: SelectionStrategy,
    pub max_len: usize,
}

impl KnowledgeExpander<'_> {
    /// Keywords and the full candidate list for a caption.
    pub fn candidates(&self, caption: &str) -> (Vec<String>, Vec<Triplet>) {
        let keywords = extract_keywords(caption, self.vocab);
        let triplets = match self.graph {
            Some(g) => retrieve_triplets(&keywords, g),
            None => Vec::new(),
        };
        (keywords, triplets)
    }

    /// Builds a sample from precomputed candidates; `stream` keys the random
    /// selection (e.g. caption index, or caption index mixed with epoch).
    pub fn sample_from(
        &self,
        caption: &str,
        keywords: Vec<String>,
        candidates: &[Triplet],
        stream: u64,
    ) -> Result<TextSample, TextError> {
        let triplets = select_triplets(candidates, self.m, self.strategy, caption, stream)?;
        let knowledge_sentence = build_knowledge_sentence(&triplets);
        Ok(TextSample {
            caption: caption.to_string(),
            caption_ids: encode_tokens(caption, self.vocab, self.max_len),
            knowledge_ids: encode_tokens(&knowledge_sentence, self.vocab, self.max_len),
            keywords,
            triplets,
            knowledge_sentence,
        })
    }

    pub fn expand(&self, caption: &str, stream: u64) -> Result<TextSample, TextError> {
        let (keywords, candidates) = self.candidates(caption);
        self.sample_from(caption, keywords, &candidates, stream)
    }
}
