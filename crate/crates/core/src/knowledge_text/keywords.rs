use super::vocab::{tokenize, Vocabulary};

/// Maps a lowercase plural to its singular form.
///
/// The exception table wins; otherwise `-ies → -y`, `-sses → -ss`, and
/// `-es`/`-s` are stripped only when the stem is a known noun.
pub fn singularize(word: &str, vocab: &Vocabulary) -> String {
    if let Some(s) = vocab.plural_exception(word) {
        return s.to_string();
    }
    // Multi-word concepts inflect on the last word.
    if let Some((prefix, last)) = word.rsplit_once(' ') {
        let full_stem = |stem: &str| format!("{prefix} {stem}");
        return match singular_suffix(last, |s| vocab.is_noun(&full_stem(s))) {
            Some(stem) => full_stem(&stem),
            None => word.to_string(),
        };
    }
    singular_suffix(word, |s| vocab.is_noun(s)).unwrap_or_else(|| word.to_string())
}

fn singular_suffix(word: &str, known: impl Fn(&str) -> bool) -> Option<String> {
    if let Some(stem) = word.strip_suffix("ies") {
        if !stem.is_empty() {
            return Some(format!("{stem}y"));
        }
    }
    if let Some(stem) = word.strip_suffix("sses") {
        return Some(format!("{stem}ss"));
    }
    if let Some(stem) = word.strip_suffix("es") {
        if known(stem) {
            return Some(stem.to_string());
        }
    }
    if let Some(stem) = word.strip_suffix('s') {
        if known(stem) {
            return Some(stem.to_string());
        }
    }
    None
}

/// Singular nouns of a caption, deduplicated in first-occurrence order.
///
/// A noun is any token (or adjacent token pair, e.g. `tennis courts`) whose
/// singular form is in the vocabulary's noun lexicon. Pairs take precedence
/// over their parts.
pub fn extract_keywords(caption: &str, vocab: &Vocabulary) -> Vec<String> {
    let tokens = tokenize(caption);
    let mut out: Vec<String> = Vec::new();
    let mut push = |w: String| {
        if !out.contains(&w) {
            out.push(w);
        }
    };
    let mut i = 0;
    while i < tokens.len() {
        if let Some(next) = tokens.get(i + 1) {
            let pair = singularize(&format!("{} {}", tokens[i], next), vocab);
            if vocab.is_noun(&pair) {
                push(pair);
                i += 2;
                continue;
            }
        }
        let single = singularize(&tokens[i], vocab);
        if vocab.is_noun(&single) {
            push(single);
        }
        i += 1;
    }
    out
}
