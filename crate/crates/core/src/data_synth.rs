//! Synthetic remote-sensing scenes whose captions leave out objects that a
//! one-hop knowledge lookup can recover, plus dataset file I/O.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize};

use crate::kg::{KnowledgeGraph, Source, Triplet};
use crate::tensor_ad::Tensor;

pub const SENTENCES_PER_IMAGE: usize = 5;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const KG_FILE: &str = "kg.tsv";
pub const IMAGE_DIR: &str = "images";
/// Default side length of rendered scenes.
pub const DEFAULT_IMAGE_SIZE: usize = 32;
/// Objects snap to a grid of this many cells per side.
const GRID: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error("bad image {path}: {reason}")]
    BadImage { path: PathBuf, reason: String },
    #[error(transparent)]
    Kg(#[from] crate::kg::KgError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Drawable objects with their fill colors and plural spelling.
pub const OBJECTS: [(&str, [u8; 3], &str); 22] = [
    ("airplane", [235, 235, 240], "airplanes"),
    ("beach", [238, 214, 175], "beaches"),
    ("boat", [250, 250, 250], "boats"),
    ("bridge", [120, 110, 100], "bridges"),
    ("building", [200, 60, 60], "buildings"),
    ("bush", [60, 110, 40], "bushes"),
    ("car", [230, 30, 30], "cars"),
    ("court", [40, 140, 120], "courts"),
    ("crop", [180, 200, 60], "crops"),
    ("field", [150, 190, 90], "fields"),
    ("grass", [100, 180, 70], "grass"),
    ("house", [170, 100, 70], "houses"),
    ("lake", [40, 80, 170], "lakes"),
    ("pool", [60, 200, 230], "pools"),
    ("river", [50, 100, 150], "rivers"),
    ("road", [90, 90, 90], "roads"),
    ("runway", [60, 60, 65], "runways"),
    ("sand", [220, 200, 140], "sand"),
    ("sea", [20, 60, 140], "sea"),
    ("ship", [210, 210, 210], "ships"),
    ("tank", [245, 245, 220], "tanks"),
    ("tree", [20, 100, 30], "trees"),
];

/// Scene categories: name, background color, co-occurring object pool.
pub const CATEGORIES: [(&str, [u8; 3], [&str; 4]); 21] = [
    (
        "agricultural",
        [140, 120, 70],
        ["field", "crop", "road", "tree"],
    ),
    (
        "airplane",
        [110, 110, 105],
        ["airplane", "runway", "grass", "car"],
    ),
    (
        "baseballdiamond",
        [120, 150, 80],
        ["field", "grass", "tree", "road"],
    ),
    ("beach", [200, 190, 150], ["beach", "sea", "sand", "boat"]),
    (
        "buildings",
        [130, 130, 140],
        ["building", "road", "car", "tree"],
    ),
    (
        "chaparral",
        [160, 140, 100],
        ["bush", "sand", "tree", "grass"],
    ),
    (
        "denseresidential",
        [120, 110, 110],
        ["house", "road", "car", "tree"],
    ),
    ("forest", [30, 70, 30], ["tree", "grass", "road", "river"]),
    ("freeway", [100, 100, 90], ["road", "car", "tree", "bridge"]),
    (
        "golfcourse",
        [90, 160, 80],
        ["grass", "tree", "sand", "lake"],
    ),
    ("harbor", [30, 70, 110], ["boat", "ship", "sea", "building"]),
    (
        "intersection",
        [115, 115, 115],
        ["road", "car", "building", "tree"],
    ),
    (
        "mediumresidential",
        [125, 125, 100],
        ["house", "tree", "road", "pool"],
    ),
    (
        "mobilehomepark",
        [140, 135, 120],
        ["house", "car", "road", "grass"],
    ),
    (
        "overpass",
        [105, 100, 95],
        ["bridge", "road", "car", "river"],
    ),
    (
        "parkinglot",
        [95, 95, 100],
        ["car", "road", "building", "tree"],
    ),
    ("river", [70, 110, 70], ["river", "tree", "bridge", "grass"]),
    (
        "runway",
        [130, 140, 120],
        ["runway", "airplane", "grass", "road"],
    ),
    (
        "sparseresidential",
        [110, 140, 80],
        ["house", "grass", "tree", "pool"],
    ),
    (
        "storagetanks",
        [150, 145, 135],
        ["tank", "road", "building", "sand"],
    ),
    (
        "tenniscourt",
        [100, 120, 100],
        ["court", "tree", "building", "road"],
    ),
];

/// Relations for object pairs that have a natural one; other pairs use
/// `next_to`.
const PAIR_RELATIONS: [(&str, &str, &str); 22] = [
    ("boat", "AtLocation", "sea"),
    ("ship", "AtLocation", "sea"),
    ("boat", "next_to", "ship"),
    ("beach", "next_to", "sea"),
    ("beach", "MadeUpOf", "sand"),
    ("airplane", "stop_at", "runway"),
    ("car", "AtLocation", "road"),
    ("bridge", "pass_through", "river"),
    ("bridge", "is_part_of", "road"),
    ("crop", "AtLocation", "field"),
    ("field", "HasA", "grass"),
    ("house", "HasA", "pool"),
    ("lake", "next_to", "sand"),
    ("road", "intersect_at", "bridge"),
    ("tree", "next_to", "road"),
    ("tree", "next_to", "river"),
    ("bush", "next_to", "tree"),
    ("tank", "is_member_of", "building"),
    ("court", "next_to", "building"),
    ("river", "next_to", "grass"),
    ("car", "stop_at", "building"),
    ("runway", "next_to", "grass"),
];

/// One descriptive fact per object, independent of the scene.
const OBJECT_FACTS: [(&str, &str, &str); 22] = [
    ("airplane", "UsedFor", "flying"),
    ("beach", "color", "yellow"),
    ("boat", "AtLocation", "water"),
    ("bridge", "UsedFor", "crossing"),
    ("building", "color", "white"),
    ("bush", "IsA", "plant"),
    ("car", "UsedFor", "driving"),
    ("court", "UsedFor", "tennis"),
    ("crop", "IsA", "plant"),
    ("field", "shape", "rectangle"),
    ("grass", "color", "green"),
    ("house", "UsedFor", "living"),
    ("lake", "HasA", "water"),
    ("pool", "HasA", "water"),
    ("river", "HasA", "water"),
    ("road", "UsedFor", "driving"),
    ("runway", "shape", "long"),
    ("sand", "color", "yellow"),
    ("sea", "color", "blue"),
    ("ship", "AtLocation", "water"),
    ("tank", "shape", "circle"),
    ("tree", "color", "green"),
];

pub fn object_color(name: &str) -> Option<[u8; 3]> {
    OBJECTS
        .iter()
        .find(|(n, _, _)| *n == name)
        .map(|(_, c, _)| *c)
}

fn plural(name: &str) -> &str {
    OBJECTS
        .iter()
        .find(|(n, _, _)| *n == name)
        .map_or(name, |(_, _, p)| p)
}

/// Axis-aligned rectangle in unit coordinates (`x`, `y` top-left).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub object: String,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub color: [u8; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub category: String,
    pub background: [u8; 3],
    pub objects: Vec<String>,
    pub layout: Vec<Placement>,
    pub captions: Vec<String>,
}

/// `[size, size, 3]` pixels in `[0, 1]`: background, then each placement
/// painted in order over the pixels whose centres it covers.
pub fn render_image(spec: &SceneSpec, size: usize) -> Tensor {
    let mut data = Vec::with_capacity(size * size * 3);
    for _ in 0..size * size {
        data.extend(spec.background.iter().map(|&c| f64::from(c) / 255.0));
    }
    for p in &spec.layout {
        for row in 0..size {
            let cy = (row as f64 + 0.5) / size as f64;
            if cy < p.y || cy >= p.y + p.h {
                continue;
            }
            for col in 0..size {
                let cx = (col as f64 + 0.5) / size as f64;
                if cx < p.x || cx >= p.x + p.w {
                    continue;
                }
                let at = (row * size + col) * 3;
                for (k, &c) in p.color.iter().enumerate() {
                    data[at + k] = f64::from(c) / 255.0;
                }
            }
        }
    }
    Tensor::new(&[size, size, 3], data).expect("pixel count")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" | "restval" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ManifestEntry {
    pub filename: String,
    pub split: Split,
    pub sentences: Vec<String>,
    pub category: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct DatasetManifest {
    #[serde(rename = "images")]
    pub entries: Vec<ManifestEntry>,
}

/// Reader-side shape: sentences may be plain strings or objects with a
/// `raw` field, and `split`/`category` may be missing or extended.
#[derive(Deserialize)]
struct RawManifest {
    images: Vec<RawEntry>,
}

#[derive(Deserialize)]
struct RawEntry {
    filename: String,
    #[serde(default)]
    filepath: Option<String>,
    split: String,
    #[serde(deserialize_with = "sentence_list")]
    sentences: Vec<String>,
    #[serde(default)]
    category: String,
}

fn sentence_list<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<String>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Sentence {
        Plain(String),
        Annotated { raw: String },
    }
    let list = Vec::<Sentence>::deserialize(d)?;
    Ok(list
        .into_iter()
        .map(|s| match s {
            Sentence::Plain(s) => s,
            Sentence::Annotated { raw } => raw,
        })
        .collect())
}

impl DatasetManifest {
    pub fn parse(text: &str) -> Result<Self, SynthError> {
        let raw: RawManifest =
            serde_json::from_str(text).map_err(|e| SynthError::MalformedManifest(e.to_string()))?;
        let mut entries = Vec::with_capacity(raw.images.len());
        for (i, e) in raw.images.into_iter().enumerate() {
            if e.sentences.len() != SENTENCES_PER_IMAGE {
                return Err(SynthError::MalformedManifest(format!(
                    "entry {i} ({}) has {} sentences, expected {SENTENCES_PER_IMAGE}",
                    e.filename,
                    e.sentences.len()
                )));
            }
            let split = Split::parse(&e.split).ok_or_else(|| {
                SynthError::MalformedManifest(format!("entry {i}: unknown split {:?}", e.split))
            })?;
            let filename = match e.filepath {
                Some(dir) if !dir.is_empty() => format!("{dir}/{}", e.filename),
                _ => e.filename,
            };
            entries.push(ManifestEntry {
                filename,
                split,
                sentences: e.sentences,
                category: e.category,
            });
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].split == split)
            .collect()
    }
}

/// Everything [`generate_dataset`] produces.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    pub scenes: Vec<SceneSpec>,
    pub images: Vec<Tensor>,
    pub kg: KnowledgeGraph,
}

/// The knowledge graph shipped with the synthetic scenes: one triplet per
/// pair of objects that share a category pool, plus one fact per object.
pub fn mini_kg() -> KnowledgeGraph {
    let mut pairs: BTreeSet<(&str, &str)> = BTreeSet::new();
    for (_, _, pool) in &CATEGORIES {
        for (i, a) in pool.iter().enumerate() {
            for b in &pool[i + 1..] {
                pairs.insert(if a < b { (a, b) } else { (b, a) });
            }
        }
    }
    let mut triplets = Vec::new();
    for (a, b) in pairs {
        let known = PAIR_RELATIONS
            .iter()
            .find(|(h, _, t)| (*h == a && *t == b) || (*h == b && *t == a));
        triplets.push(match known {
            Some((h, r, t)) => Triplet::new(h, r, t, Source::Rskg),
            None => Triplet::new(a, "next_to", b, Source::Rskg),
        });
    }
    for (h, r, t) in OBJECT_FACTS {
        triplets.push(Triplet::new(h, r, t, Source::Rskg));
    }
    KnowledgeGraph::from_triplets(triplets)
}

fn article(word: &str) -> &'static str {
    if word.starts_with(['a', 'e', 'i', 'o', 'u']) {
        "an"
    } else {
        "a"
    }
}

fn list_phrase(words: &[String], rng: &mut impl Rng) -> String {
    let plural_form = rng.random_bool(0.5);
    let parts: Vec<String> = words
        .iter()
        .map(|w| {
            if plural_form && plural(w) != w {
                format!("some {}", plural(w))
            } else {
                format!("{} {w}", article(w))
            }
        })
        .collect();
    match parts.len() {
        1 => parts[0].clone(),
        2 => format!("{} and {}", parts[0], parts[1]),
        n => format!("{} and {}", parts[..n - 1].join(", "), parts[n - 1]),
    }
}

fn caption(mentioned: &[String], rng: &mut impl Rng) -> String {
    let phrase = list_phrase(mentioned, rng);
    match rng.random_range(0..4) {
        0 => format!("There is {phrase}."),
        1 => format!("We can see {phrase} in this area."),
        2 => format!("This image shows {phrase}."),
        _ => {
            let mut s = format!("{phrase} can be seen here.");
            s[..1].make_ascii_uppercase();
            s
        }
    }
}

fn scene(category: usize, omit_prob: f64, rng: &mut impl Rng) -> SceneSpec {
    let (name, background, pool) = CATEGORIES[category];
    let count = rng.random_range(2..=pool.len());
    let mut objects: Vec<String> = pool
        .choose_multiple(rng, count)
        .map(|s| s.to_string())
        .collect();
    objects.shuffle(rng);

    let cell = 1.0 / GRID as f64;
    let layout = objects
        .iter()
        .map(|o| {
            let w = rng.random_range(2..=4);
            let h = rng.random_range(2..=4);
            Placement {
                object: o.clone(),
                x: rng.random_range(0..=GRID - w) as f64 * cell,
                y: rng.random_range(0..=GRID - h) as f64 * cell,
                w: w as f64 * cell,
                h: h as f64 * cell,
                color: object_color(o).expect("pool objects are drawable"),
            }
        })
        .collect();

    let captions = (0..SENTENCES_PER_IMAGE)
        .map(|_| {
            let mut mentioned: Vec<String> = objects
                .iter()
                .filter(|_| !rng.random_bool(omit_prob))
                .cloned()
                .collect();
            if mentioned.is_empty() {
                mentioned.push(objects.choose(rng).expect("non-empty").clone());
            }
            mentioned.shuffle(rng);
            caption(&mentioned, rng)
        })
        .collect();

    SceneSpec {
        category: name.to_string(),
        background,
        objects,
        layout,
        captions,
    }
}

/// Split by position in the corpus: every tenth image (from the first) is
/// test, every tenth from the sixth is validation.
fn split_for(index: usize) -> Split {
    match index % 10 {
        0 => Split::Test,
        5 => Split::Val,
        _ => Split::Train,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_images: usize,
    pub seed: u64,
    pub omit_prob: f64,
    pub image_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_images: 300,
            seed: 0,
            omit_prob: 0.5,
            image_size: DEFAULT_IMAGE_SIZE,
        }
    }
}

/// Deterministic corpus of `n_images` scenes cycling through the categories.
pub fn generate_dataset(
    n_images: usize,
    seed: u64,
    omit_prob: f64,
) -> Result<SyntheticDataset, SynthError> {
    generate_with(&SynthConfig {
        n_images,
        seed,
        omit_prob,
        image_size: DEFAULT_IMAGE_SIZE,
    })
}

pub fn generate_with(config: &SynthConfig) -> Result<SyntheticDataset, SynthError> {
    if config.n_images < 10 {
        return Err(SynthError::InvalidArg(format!(
            "need at least 10 images, got {}",
            config.n_images
        )));
    }
    if !(0.0..=1.0).contains(&config.omit_prob) {
        return Err(SynthError::InvalidArg(format!(
            "omit_prob {} outside [0, 1]",
            config.omit_prob
        )));
    }
    if config.image_size == 0 {
        return Err(SynthError::InvalidArg("image size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut scenes = Vec::with_capacity(config.n_images);
    let mut entries = Vec::with_capacity(config.n_images);
    for i in 0..config.n_images {
        let s = scene(i % CATEGORIES.len(), config.omit_prob, &mut rng);
        entries.push(ManifestEntry {
            filename: format!("{IMAGE_DIR}/{}_{i:04}.ppm", s.category),
            split: split_for(i),
            sentences: s.captions.clone(),
            category: s.category.clone(),
        });
        scenes.push(s);
    }
    let images = scenes
        .iter()
        .map(|s| render_image(s, config.image_size))
        .collect();
    Ok(SyntheticDataset {
        manifest: DatasetManifest { entries },
        scenes,
        images,
        kg: mini_kg(),
    })
}

/// Binary PPM (P6), channels quantized to bytes.
pub fn write_ppm(path: &Path, pixels: &Tensor) -> Result<(), SynthError> {
    let shape = pixels.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(SynthError::InvalidArg(format!(
            "expected [h, w, 3] pixels, got {shape:?}"
        )));
    }
    let mut out = format!("P6\n{} {}\n255\n", shape[1], shape[0]).into_bytes();
    out.extend(
        pixels
            .data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(path, out)?;
    Ok(())
}

fn ppm_token(r: &mut impl BufRead) -> std::io::Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)?;
        let c = byte[0] as char;
        if c == '#' && tok.is_empty() {
            let mut skip = Vec::new();
            r.read_until(b'\n', &mut skip)?;
        } else if c.is_ascii_whitespace() {
            if !tok.is_empty() {
                return Ok(tok);
            }
        } else {
            tok.push(c);
        }
    }
}

pub fn read_ppm(path: &Path) -> Result<Tensor, SynthError> {
    let bad = |reason: String| SynthError::BadImage {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = BufReader::new(fs::File::open(path)?);
    if ppm_token(&mut r)? != "P6" {
        return Err(bad("not a binary PPM".into()));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = ppm_token(&mut r)?
            .parse()
            .map_err(|e| bad(format!("header: {e}")))?;
    }
    let [w, h, max] = dims;
    if max == 0 || max > 255 {
        return Err(bad(format!("unsupported max value {max}")));
    }
    let mut bytes = vec![0u8; w * h * 3];
    r.read_exact(&mut bytes)
        .map_err(|e| bad(format!("pixel data: {e}")))?;
    let data = bytes.iter().map(|&b| f64::from(b) / max as f64).collect();
    Tensor::new(&[h, w, 3], data).map_err(|e| bad(e.to_string()))
}

/// Loads any supported image as `[size, size, 3]` in `[0, 1]`, resizing
/// when needed. PPM files of the right size are read exactly.
pub fn load_image(path: &Path, size: usize) -> Result<Tensor, SynthError> {
    let is_ppm = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
    if is_ppm {
        let t = read_ppm(path)?;
        if t.shape() == [size, size, 3] {
            return Ok(t);
        }
    }
    let img = image::open(path).map_err(|e| SynthError::BadImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = img
        .resize_exact(
            size as u32,
            size as u32,
            image::imageops::FilterType::Triangle,
        )
        .to_rgb8();
    let data = rgb.as_raw().iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(Tensor::new(&[size, size, 3], data).expect("rgb buffer"))
}

/// Writes the manifest, images and knowledge graph under `dir`.
pub fn write_dataset(data: &SyntheticDataset, dir: &Path) -> Result<(), SynthError> {
    fs::create_dir_all(dir.join(IMAGE_DIR))?;
    for (entry, img) in data.manifest.entries.iter().zip(&data.images) {
        write_ppm(&dir.join(&entry.filename), img)?;
    }
    let mut f = fs::File::create(dir.join(MANIFEST_FILE))?;
    f.write_all(data.manifest.to_json().as_bytes())?;
    f.write_all(b"\n")?;
    data.kg.save(&dir.join(KG_FILE))?;
    Ok(())
}

/// A dataset as stored on disk: manifest plus decoded images.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Tensor>,
}

/// Reads `dir/manifest.json` and every image it lists, resized to `size`.
pub fn read_dataset(dir: &Path, size: usize) -> Result<LoadedDataset, SynthError> {
    let manifest = DatasetManifest::load(&dir.join(MANIFEST_FILE))?;
    let images = manifest
        .entries
        .iter()
        .map(|e| load_image(&dir.join(&e.filename), size))
        .collect::<Result<_, _>>()?;
    Ok(LoadedDataset { manifest, images })
}
