use std::collections::BTreeSet;
use std::path::Path;

use kgret::data_synth::{
    generate_dataset, mini_kg, read_dataset, write_dataset, DatasetManifest, Split, MANIFEST_FILE,
};
use kgret::kg::{KnowledgeGraph, LoadOptions, Source};
use kgret::knowledge_text::{extract_keywords, Vocabulary};

fn vocab_with(graph: &KnowledgeGraph) -> Vocabulary {
    let mut v = Vocabulary::with_default_lexicon();
    v.extend_lexicon(graph.objects().iter().map(String::as_str));
    v
}

#[test]
fn omitted_objects_are_one_hop_from_the_caption() {
    let data = generate_dataset(120, 4, 0.5).unwrap();
    let vocab = vocab_with(&data.kg);
    let mut omissions = 0;
    for scene in &data.scenes {
        for caption in &scene.captions {
            let keywords = extract_keywords(caption, &vocab);
            assert!(!keywords.is_empty(), "{caption}");
            let reachable: BTreeSet<String> = data
                .kg
                .one_step_neighbors(&keywords)
                .into_iter()
                .flat_map(|t| [t.head, t.tail])
                .collect();
            for object in &scene.objects {
                if !keywords.contains(object) {
                    omissions += 1;
                    assert!(
                        reachable.contains(object),
                        "{object} unreachable from {caption:?}"
                    );
                }
            }
        }
    }
    assert!(omissions > 0);
}

#[test]
fn no_omission_mentions_everything() {
    let data = generate_dataset(42, 1, 0.0).unwrap();
    let vocab = vocab_with(&data.kg);
    for scene in &data.scenes {
        for caption in &scene.captions {
            let keywords: BTreeSet<String> =
                extract_keywords(caption, &vocab).into_iter().collect();
            for object in &scene.objects {
                assert!(
                    keywords.contains(object),
                    "{object} missing from {caption:?}"
                );
            }
        }
    }
}

#[test]
fn default_corpus_split_sizes() {
    let data = generate_dataset(300, 0, 0.5).unwrap();
    let m = &data.manifest;
    assert_eq!(m.indices(Split::Test).len(), 30);
    assert_eq!(m.indices(Split::Val).len(), 30);
    assert_eq!(m.indices(Split::Train).len(), 240);
    let categories: BTreeSet<&str> = m.entries.iter().map(|e| e.category.as_str()).collect();
    assert_eq!(categories.len(), 21);
    assert!(m.entries.iter().all(|e| e.sentences.len() == 5));
}

#[test]
fn disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_dataset(20, 3, 0.5).unwrap();
    write_dataset(&data, dir.path()).unwrap();
    let loaded = read_dataset(dir.path(), 32).unwrap();
    assert_eq!(loaded.manifest, data.manifest);
    for (a, b) in loaded.images.iter().zip(&data.images) {
        // Bytes on disk: at most half a quantization step apart.
        assert!(a.max_abs_diff(b) <= 0.5 / 255.0 + 1e-12);
    }
    let kg = KnowledgeGraph::load(
        &dir.path().join("kg.tsv"),
        Source::Rskg,
        &LoadOptions::default(),
    )
    .unwrap();
    assert_eq!(kg, data.kg);
}

#[test]
fn shipped_fixture_matches_generator() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/mini_kg.tsv");
    assert_eq!(std::fs::read_to_string(path).unwrap(), mini_kg().to_tsv());
}

#[test]
fn hand_written_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_dataset(10, 0, 0.5).unwrap();
    write_dataset(&data, dir.path()).unwrap();
    let names: Vec<&str> = data
        .manifest
        .entries
        .iter()
        .map(|e| e.filename.as_str())
        .collect();
    let sentences = |word: &str| {
        (0..5)
            .map(|i| format!(r#"{{"raw": "There is a {word} number {i}."}}"#))
            .collect::<Vec<_>>()
            .join(", ")
    };
    let text = format!(
        r#"{{"images": [
            {{"filename": "{}", "split": "train", "sentences": [{}]}},
            {{"filename": "{}", "split": "restval", "sentences": [{}], "category": "harbor"}},
            {{"filename": "{}", "split": "test", "sentences": [{}]}}
        ]}}"#,
        names[0],
        sentences("lake"),
        names[1],
        sentences("boat"),
        names[2],
        sentences("road"),
    );
    std::fs::write(dir.path().join(MANIFEST_FILE), &text).unwrap();
    let loaded = read_dataset(dir.path(), 32).unwrap();
    assert_eq!(loaded.images.len(), 3);
    assert_eq!(loaded.manifest.indices(Split::Train), vec![0, 1]);
    assert_eq!(loaded.manifest.indices(Split::Test), vec![2]);
    assert_eq!(
        loaded.manifest.entries[1].sentences[0],
        "There is a boat number 0."
    );

    let four = text.replacen(r#", {"raw": "There is a road number 4."}"#, "", 1);
    assert!(DatasetManifest::parse(&four).is_err());
}
