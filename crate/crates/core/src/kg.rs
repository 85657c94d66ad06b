//! Knowledge graphs as one-step-neighbourhood triplet stores.
//!
//! Graphs are read from a TSV snapshot (`head<TAB>relation<TAB>tail[<TAB>source]`),
//! filtered to ASCII concepts, deduplicated, and indexed by object so that
//! every triplet touching a keyword can be found without a scan.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The fifteen ConceptNet relations kept by default.
pub const CONCEPTNET_RELATIONS: [&str; 15] = [
    "UsedFor",
    "ReceivesAction",
    "HasA",
    "Causes",
    "HasProperty",
    "CreatedBy",
    "DefinedAs",
    "AtLocation",
    "HasSubEvent",
    "MadeUpOf",
    "HasPrerequisite",
    "Desires",
    "NotDesires",
    "IsA",
    "CapableOf",
];

#[derive(Debug, thiserror::Error)]
pub enum KgError {
    #[error("line {line_no}: expected 3 or 4 tab-separated fields, found {fields}")]
    MalformedLine { line_no: usize, fields: usize },
    #[error("line {line_no}: unknown source tag {tag:?}")]
    UnknownSource { line_no: usize, tag: String },
    #[error("line {line_no}: relation {relation:?} is not in the allowed set")]
    UnknownRelation { line_no: usize, relation: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Source {
    #[serde(rename = "RSKG")]
    Rskg,
    ConceptNet,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Rskg => "RSKG",
            Source::ConceptNet => "ConceptNet",
        })
    }
}

impl FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rskg" => Ok(Source::Rskg),
            "conceptnet" => Ok(Source::ConceptNet),
            other => Err(other.to_string()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub source: Source,
}

impl Triplet {
    pub fn new(head: &str, relation: &str, tail: &str, source: Source) -> Self {
        Self {
            head: head.to_string(),
            relation: relation.to_string(),
            tail: tail.to_string(),
            source,
        }
    }
}

impl fmt::Display for Triplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{}, {}, {}>", self.head, self.relation, self.tail)
    }
}

/// Lowercases, maps `_` to space, collapses whitespace, and strips a
/// ConceptNet URI prefix (`/c/en/boat/n` → `boat`). Returns `None` for
/// concepts that are empty, non-English, or contain anything besides ASCII
/// letters, digits and spaces.
pub fn normalize_concept(raw: &str) -> Option<String> {
    let mut s = raw.trim();
    if let Some(rest) = s.strip_prefix("/c/") {
        let mut parts = rest.split('/');
        let lang = parts.next()?;
        if lang != "en" {
            return None;
        }
        s = parts.next()?;
    }
    let lowered = s.to_ascii_lowercase().replace('_', " ");
    let norm = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    if norm.is_empty() || !norm.bytes().all(|b| b.is_ascii_alphanumeric() || b == b' ') {
        return None;
    }
    Some(norm)
}

/// Strips a ConceptNet relation URI prefix (`/r/AtLocation` → `AtLocation`).
pub fn normalize_relation(raw: &str) -> String {
    let s = raw.trim();
    s.strip_prefix("/r/").unwrap_or(s).to_string()
}

#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    /// Keep only these relations; `None` keeps all.
    pub allowed_relations: Option<HashSet<String>>,
    /// Fail on a relation outside `allowed_relations` instead of skipping it.
    pub strict_relations: bool,
}

impl LoadOptions {
    /// The fifteen default ConceptNet relations.
    pub fn conceptnet() -> Self {
        Self {
            allowed_relations: Some(CONCEPTNET_RELATIONS.iter().map(|s| s.to_string()).collect()),
            strict_relations: false,
        }
    }
}

/// Object/relation/triplet counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStats {
    pub n_objects: usize,
    pub n_relations: usize,
    pub n_triplets: usize,
}

/// Published sizes of the three knowledge sources, for checking exports.
pub mod reference_stats {
    use super::GraphStats;

    pub const RSKG: GraphStats = GraphStats {
        n_objects: 117,
        n_relations: 26,
        n_triplets: 191,
    };
    pub const CONCEPTNET: GraphStats = GraphStats {
        n_objects: 3855,
        n_relations: 15,
        n_triplets: 3343,
    };
    pub const COMBINED: GraphStats = GraphStats {
        n_objects: 908,
        n_relations: 41,
        n_triplets: 748,
    };
}

/// Immutable triplet store in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KnowledgeGraph {
    triplets: Vec<Triplet>,
    objects: BTreeSet<String>,
    relations: BTreeSet<String>,
    index: HashMap<String, Vec<usize>>,
}

impl KnowledgeGraph {
    /// Builds a graph, dropping duplicate `(head, relation, tail, source)`
    /// tuples and keeping first occurrences in order.
    pub fn from_triplets(triplets: impl IntoIterator<Item = Triplet>) -> Self {
        let mut g = Self::default();
        let mut seen = HashSet::new();
        for t in triplets {
            let key = (t.head.clone(), t.relation.clone(), t.tail.clone(), t.source);
            if !seen.insert(key) {
                continue;
            }
            let i = g.triplets.len();
            g.objects.insert(t.head.clone());
            g.objects.insert(t.tail.clone());
            g.relations.insert(t.relation.clone());
            g.index.entry(t.head.clone()).or_default().push(i);
            if t.tail != t.head {
                g.index.entry(t.tail.clone()).or_default().push(i);
            }
            g.triplets.push(t);
        }
        g
    }

    pub fn parse(text: &str, default_source: Source, opts: &LoadOptions) -> Result<Self, KgError> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if !(3..=4).contains(&fields.len()) {
                return Err(KgError::MalformedLine {
                    line_no,
                    fields: fields.len(),
                });
            }
            let source = match fields.get(3) {
                Some(tag) if !tag.trim().is_empty() => tag
                    .parse()
                    .map_err(|tag| KgError::UnknownSource { line_no, tag })?,
                _ => default_source,
            };
            let relation = normalize_relation(fields[1]);
            if let Some(allowed) = &opts.allowed_relations {
                if !allowed.contains(&relation) {
                    if opts.strict_relations {
                        return Err(KgError::UnknownRelation { line_no, relation });
                    }
                    continue;
                }
            }
            let (Some(head), Some(tail)) =
                (normalize_concept(fields[0]), normalize_concept(fields[2]))
            else {
                continue;
            };
            rows.push(Triplet {
                head,
                relation,
                tail,
                source,
            });
        }
        Ok(Self::from_triplets(rows))
    }

    pub fn load(path: &Path, source: Source, opts: &LoadOptions) -> Result<Self, KgError> {
        Self::parse(&fs::read_to_string(path)?, source, opts)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for t in &self.triplets {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                t.head, t.relation, t.tail, t.source
            ));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), KgError> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_tsv().as_bytes())?;
        Ok(())
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn objects(&self) -> &BTreeSet<String> {
        &self.objects
    }

    pub fn relations(&self) -> &BTreeSet<String> {
        &self.relations
    }

    pub fn contains_object(&self, object: &str) -> bool {
        self.objects.contains(object)
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn stats(&self) -> GraphStats {
        GraphStats {
            n_objects: self.objects.len(),
            n_relations: self.relations.len(),
            n_triplets: self.triplets.len(),
        }
    }

    /// Every triplet whose head or tail is one of `keywords`, in graph order,
    /// each at most once.
    pub fn one_step_neighbors<S: AsRef<str>>(&self, keywords: &[S]) -> Vec<Triplet> {
        let mut hits: Vec<usize> = keywords
            .iter()
            .filter_map(|k| self.index.get(k.as_ref()))
            .flatten()
            .copied()
            .collect();
        hits.sort_unstable();
        hits.dedup();
        hits.into_iter().map(|i| self.triplets[i].clone()).collect()
    }

    /// All RSKG triplets plus the ConceptNet triplets with at least one
    /// endpoint among the RSKG objects.
    pub fn combine(rskg: &KnowledgeGraph, conceptnet: &KnowledgeGraph) -> KnowledgeGraph {
        let kept = conceptnet
            .triplets
            .iter()
            .filter(|t| rskg.contains_object(&t.head) || rskg.contains_object(&t.tail));
        KnowledgeGraph::from_triplets(rskg.triplets.iter().chain(kept).cloned())
    }

    pub fn merge(graphs: &[&KnowledgeGraph]) -> KnowledgeGraph {
        KnowledgeGraph::from_triplets(graphs.iter().flat_map(|g| g.triplets.iter().cloned()))
    }
}
