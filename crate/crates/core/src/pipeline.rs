//! End-to-end commands: knowledge extraction, training, evaluation and
//! synthetic data generation. The CLI is a thin layer over these.

use std::collections::HashMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_synth::{
    self, DatasetManifest, LoadedDataset, Split, SynthConfig, SynthError, KG_FILE,
};
use crate::encoders::{
    momentum_update, EncoderConfig, EncoderError, FusionMode, Model, Pooling, DEFAULT_MOMENTUM,
};
use crate::kg::{KgError, KnowledgeGraph, LoadOptions, Source, Triplet};
use crate::knowledge_text::{
    triplet_to_sentence, KnowledgeExpander, SelectionStrategy, TextError, Vocabulary,
};
use crate::objectives::{batch_loss, LossConfig, ObjectiveError, TrainPair};
use crate::retrieval_eval::{self, EvalError, RetrievalMetrics, TextItem};
use crate::tensor_ad::{
    checkpoint, AdamW, AdamWConfig, LrSchedule, ParamStore, Tape, Tensor, TensorError,
};

pub const CONFIG_FILE: &str = "config.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const MODEL_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const EXTRACT_FILE: &str = "knowledge.jsonl";
/// Prefix of the momentum copy's tensors inside a checkpoint.
pub const MOMENTUM_PREFIX: &str = "momentum.";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("loss became non-finite at step {step} ({value})")]
    Diverged { step: usize, value: f64 },
    #[error("{what} {path}: {source}")]
    Read {
        what: &'static str,
        path: PathBuf,
        source: Box<PipelineError>,
    },
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which graph supplies knowledge.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KnowledgeSource {
    Rskg,
    Conceptnet,
    #[default]
    Combined,
    None,
}

impl fmt::Display for KnowledgeSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KnowledgeSource::Rskg => "rskg",
            KnowledgeSource::Conceptnet => "conceptnet",
            KnowledgeSource::Combined => "combined",
            KnowledgeSource::None => "none",
        })
    }
}

impl FromStr for KnowledgeSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "rskg" => Ok(KnowledgeSource::Rskg),
            "conceptnet" => Ok(KnowledgeSource::Conceptnet),
            "combined" => Ok(KnowledgeSource::Combined),
            "none" => Ok(KnowledgeSource::None),
            other => Err(format!("unknown knowledge source {other:?}")),
        }
    }
}

/// Every knob of a run. Unset fields take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory holding `manifest.json` and the images.
    pub data_dir: PathBuf,
    /// Knowledge TSV files; rows without a source column count as RSKG.
    pub kg: Vec<PathBuf>,
    /// ConceptNet-style TSV files (URIs allowed, relations filtered).
    pub conceptnet: Vec<PathBuf>,
    pub source: KnowledgeSource,
    pub output_dir: PathBuf,
    /// Checkpoint to evaluate; defaults to `output_dir/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
    pub fusion: FusionMode,
    pub pooling: Pooling,
    pub m: usize,
    /// Written by name; the seed always comes from `seed`.
    #[serde(with = "strategy_name")]
    pub strategy: SelectionStrategy,
    pub w1: f64,
    pub w2: f64,
    pub soft_label_mix: f64,
    pub hard_negative: bool,
    pub momentum: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_proj: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub max_text_len: usize,
    /// Restrict matching-head scoring to each query's top candidates.
    pub top_k: Option<usize>,
    /// Write the text→image score matrix here during evaluation.
    pub export_sim: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let enc = EncoderConfig::desk(0);
        Self {
            data_dir: PathBuf::from("data"),
            kg: Vec::new(),
            conceptnet: Vec::new(),
            source: KnowledgeSource::Combined,
            output_dir: PathBuf::from("runs"),
            checkpoint: None,
            fusion: FusionMode::CrossAttention,
            pooling: Pooling::Cls,
            m: 5,
            strategy: SelectionStrategy::Random { seed: 0 },
            w1: 1.0,
            w2: 1.0,
            soft_label_mix: 0.4,
            hard_negative: true,
            momentum: DEFAULT_MOMENTUM,
            epochs: 10,
            batch: 16,
            lr: 1e-3,
            min_lr: 0.0,
            weight_decay: AdamWConfig::default().weight_decay,
            max_steps: None,
            seed: 0,
            d_model: enc.d_model,
            n_heads: enc.n_heads,
            n_layers: enc.n_layers,
            d_proj: enc.d_proj,
            image_size: enc.image_size,
            patch_size: enc.patch_size,
            max_text_len: enc.max_text_len,
            top_k: None,
            export_sim: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.m == 0 {
            return bad("m must be at least 1".into());
        }
        if self.w2 > 0.0 && self.batch < 2 {
            return bad(format!(
                "batch {} too small for matching negatives",
                self.batch
            ));
        }
        if self.batch == 0 || self.epochs == 0 {
            return bad("batch and epochs must be positive".into());
        }
        if !(self.lr > 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return bad(format!(
                "need 0 <= min_lr <= lr and lr > 0, got {} / {}",
                self.min_lr, self.lr
            ));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1]", self.momentum));
        }
        self.loss_config().validate()?;
        self.encoder_config(crate::knowledge_text::NUM_RESERVED)
            .validate()?;
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            w1: self.w1,
            w2: self.w2,
            soft_label_mix: self.soft_label_mix,
            hard_negative: self.hard_negative,
        }
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_proj: self.d_proj,
            image_size: self.image_size,
            channels: 3,
            patch_size: self.patch_size,
            max_text_len: self.max_text_len,
            vocab_size,
            ffn_mult: 4,
            fusion_mode: self.fusion,
            pooling: self.pooling,
        }
    }

    pub fn strategy(&self) -> SelectionStrategy {
        self.strategy.with_seed(self.seed)
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.output_dir.join(MODEL_FILE))
    }
}

mod strategy_name {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::knowledge_text::SelectionStrategy;

    pub fn serialize<S: Serializer>(s: &SelectionStrategy, ser: S) -> Result<S::Ok, S::Error> {
        ser.collect_str(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<SelectionStrategy, D::Error> {
        String::deserialize(de)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

/// Loads the configured graphs and reduces them to the requested source.
/// Without any `--kg` file, `data_dir/kg.tsv` is used when present.
pub fn load_knowledge(config: &RunConfig) -> Result<Option<KnowledgeGraph>, PipelineError> {
    if config.source == KnowledgeSource::None {
        return Ok(None);
    }
    let mut kg_paths = config.kg.clone();
    if kg_paths.is_empty() && config.conceptnet.is_empty() {
        let fallback = config.data_dir.join(KG_FILE);
        if fallback.exists() {
            kg_paths.push(fallback);
        }
    }
    let mut graphs = Vec::new();
    for p in &kg_paths {
        graphs.push(KnowledgeGraph::load(
            p,
            Source::Rskg,
            &LoadOptions::default(),
        )?);
    }
    for p in &config.conceptnet {
        graphs.push(KnowledgeGraph::load(
            p,
            Source::ConceptNet,
            &LoadOptions::conceptnet(),
        )?);
    }
    let all = KnowledgeGraph::merge(&graphs.iter().collect::<Vec<_>>());
    Ok(Some(select_source(&all, config.source)))
}

/// Keeps the triplets of one source, or applies the combination rule.
pub fn select_source(graph: &KnowledgeGraph, source: KnowledgeSource) -> KnowledgeGraph {
    let only = |s: Source| {
        KnowledgeGraph::from_triplets(graph.triplets().iter().filter(|t| t.source == s).cloned())
    };
    match source {
        KnowledgeSource::Rskg => only(Source::Rskg),
        KnowledgeSource::Conceptnet => only(Source::ConceptNet),
        KnowledgeSource::Combined => {
            KnowledgeGraph::combine(&only(Source::Rskg), &only(Source::ConceptNet))
        }
        KnowledgeSource::None => KnowledgeGraph::default(),
    }
}

/// Default lexicon extended with the graph's concepts; tokens from the
/// training captions and every verbalized triplet.
pub fn build_vocabulary(manifest: &DatasetManifest, graph: Option<&KnowledgeGraph>) -> Vocabulary {
    let mut vocab = Vocabulary::with_default_lexicon();
    if let Some(g) = graph {
        vocab.extend_lexicon(g.objects().iter().map(String::as_str));
    }
    for e in manifest.entries.iter().filter(|e| e.split == Split::Train) {
        vocab.add_texts(e.sentences.iter().map(String::as_str));
    }
    if let Some(g) = graph {
        let sentences: Vec<String> = g.triplets().iter().map(triplet_to_sentence).collect();
        vocab.add_texts(sentences.iter().map(String::as_str));
    }
    vocab
}

/// Lexicon and noun handling for a vocabulary restored from disk.
pub fn restore_vocabulary(
    path: &Path,
    graph: Option<&KnowledgeGraph>,
) -> Result<Vocabulary, PipelineError> {
    let mut vocab = Vocabulary::with_default_lexicon();
    if let Some(g) = graph {
        vocab.extend_lexicon(g.objects().iter().map(String::as_str));
    }
    vocab.load_tokens(path)?;
    Ok(vocab)
}

fn caption_stream(image: usize, sentence: usize) -> u64 {
    (image * data_synth::SENTENCES_PER_IMAGE + sentence) as u64
}

/// One line of the extraction output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractRecord {
    pub image: String,
    pub split: Split,
    pub sentence_index: usize,
    pub caption: String,
    pub keywords: Vec<String>,
    pub triplets: Vec<Triplet>,
    pub knowledge_sentence: String,
}

/// Knowledge for every caption of the manifest, in manifest order.
pub fn extract_records(
    manifest: &DatasetManifest,
    graph: Option<&KnowledgeGraph>,
    config: &RunConfig,
) -> Result<Vec<ExtractRecord>, PipelineError> {
    let mut vocab = Vocabulary::with_default_lexicon();
    if let Some(g) = graph {
        vocab.extend_lexicon(g.objects().iter().map(String::as_str));
    }
    let expander = KnowledgeExpander {
        vocab: &vocab,
        graph,
        m: config.m,
        strategy: config.strategy(),
        max_len: config.max_text_len,
    };
    let mut out = Vec::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        for (j, caption) in e.sentences.iter().enumerate() {
            let s = expander.expand(caption, caption_stream(i, j))?;
            out.push(ExtractRecord {
                image: e.filename.clone(),
                split: e.split,
                sentence_index: j,
                caption: caption.clone(),
                keywords: s.keywords,
                triplets: s.triplets,
                knowledge_sentence: s.knowledge_sentence,
            });
        }
    }
    Ok(out)
}

/// Writes `knowledge.jsonl` (one record per caption) into the output dir.
pub fn cmd_extract(config: &RunConfig) -> Result<PathBuf, PipelineError> {
    if config.m == 0 {
        return Err(PipelineError::Config("m must be at least 1".into()));
    }
    let manifest = DatasetManifest::load(&config.data_dir.join(data_synth::MANIFEST_FILE))?;
    let graph = load_knowledge(config)?;
    let records = extract_records(&manifest, graph.as_ref(), config)?;
    fs::create_dir_all(&config.output_dir)?;
    let path = config.output_dir.join(EXTRACT_FILE);
    let mut w = BufWriter::new(File::create(&path)?);
    for r in &records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(path)
}

/// Per-caption keywords and candidate triplets, computed once.
struct CandidateCache {
    entries: Vec<Vec<(Vec<String>, Vec<Triplet>)>>,
}

impl CandidateCache {
    fn build(
        manifest: &DatasetManifest,
        images: &[usize],
        expander: &KnowledgeExpander<'_>,
    ) -> Self {
        let mut entries = vec![Vec::new(); manifest.entries.len()];
        for &i in images {
            entries[i] = manifest.entries[i]
                .sentences
                .iter()
                .map(|c| expander.candidates(c))
                .collect();
        }
        Self { entries }
    }
}

fn text_item(
    expander: &KnowledgeExpander<'_>,
    cache: &CandidateCache,
    manifest: &DatasetManifest,
    image: usize,
    sentence: usize,
    stream: u64,
) -> Result<TextItem, PipelineError> {
    let caption = &manifest.entries[image].sentences[sentence];
    let (keywords, candidates) = &cache.entries[image][sentence];
    let s = expander.sample_from(caption, keywords.clone(), candidates, stream)?;
    Ok(TextItem {
        caption_ids: s.caption_ids,
        knowledge_ids: s.knowledge_ids,
    })
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub l_con: f64,
    pub l_mat: f64,
    pub total: f64,
    pub tau: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub momentum: ParamStore,
    pub vocab: Vocabulary,
    pub log: Vec<StepLog>,
}

/// Soft-label weight ramps linearly from 0 over the first epoch, since the
/// momentum copy starts as untrained as the online model.
fn soft_label_weight(target: f64, step: usize, steps_per_epoch: usize) -> f64 {
    target * (step as f64 / steps_per_epoch.max(1) as f64).min(1.0)
}

/// EMA decay with the usual warmup `(1 + t) / (10 + t)`, capped at `target`.
/// Without it a short run leaves most of the momentum copy at its random
/// init and the soft targets stay close to uniform.
pub fn momentum_coefficient(target: f64, step: usize) -> f64 {
    let t = step as f64;
    target.min((1.0 + t) / (10.0 + t))
}

/// Trains on the train split. `on_epoch` runs after each epoch with the
/// epoch number (from 1) and the current state; `on_step` sees every log row.
pub fn train(
    config: &RunConfig,
    data: &LoadedDataset,
    graph: Option<&KnowledgeGraph>,
    mut on_step: impl FnMut(&StepLog),
    mut on_epoch: impl FnMut(usize, &Model, &ParamStore) -> Result<(), PipelineError>,
) -> Result<TrainOutcome, PipelineError> {
    config.validate()?;
    let manifest = &data.manifest;
    let vocab = build_vocabulary(manifest, graph);
    let enc = config.encoder_config(vocab.len());
    let mut model = Model::new(enc, config.seed)?;
    let mut momentum = model.params.clone();
    let mut opt = AdamW::new(
        &model.params,
        AdamWConfig {
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let loss_config = config.loss_config();

    let train_images = manifest.indices(Split::Train);
    let min_batch = if config.w2 > 0.0 { 2 } else { 1 };
    if train_images.len() < min_batch {
        return Err(PipelineError::Config("training split is too small".into()));
    }
    let graph_for_text = if config.fusion.uses_knowledge() {
        graph
    } else {
        None
    };
    let expander = KnowledgeExpander {
        vocab: &vocab,
        graph: graph_for_text,
        m: config.m,
        strategy: config.strategy(),
        max_len: config.max_text_len,
    };
    let cache = CandidateCache::build(manifest, &train_images, &expander);

    let batch = config.batch.min(train_images.len());
    let steps_per_epoch = train_images.len() / batch;
    let planned = steps_per_epoch * config.epochs;
    let total_steps = config.max_steps.map_or(planned, |m| m.min(planned).max(1));
    let schedule = LrSchedule::new(config.lr, total_steps as u64, config.min_lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);

    let mut log = Vec::with_capacity(total_steps);
    let mut step = 0usize;
    'epochs: for epoch in 0..config.epochs {
        let mut order = train_images.clone();
        order.shuffle(&mut rng);
        for chunk in order.chunks_exact(batch) {
            if step >= total_steps {
                break 'epochs;
            }
            let mut items = Vec::with_capacity(batch);
            for &img in chunk {
                let sentence = rng.random_range(0..manifest.entries[img].sentences.len());
                let stream = (caption_stream(img, sentence) << 16) | epoch as u64;
                items.push(text_item(
                    &expander, &cache, manifest, img, sentence, stream,
                )?);
            }
            let pairs: Vec<TrainPair<'_>> = chunk
                .iter()
                .zip(&items)
                .map(|(&img, t)| TrainPair {
                    pixels: &data.images[img],
                    caption_ids: &t.caption_ids,
                    knowledge_ids: &t.knowledge_ids,
                })
                .collect();
            let step_config = LossConfig {
                soft_label_mix: soft_label_weight(
                    loss_config.soft_label_mix,
                    step,
                    steps_per_epoch,
                ),
                ..loss_config
            };
            let lr = schedule.lr_at(step as u64);
            let tau = model.tau();
            let (row, grads) = {
                let tape = Tape::new();
                let p = model.params.bind(&tape, true);
                let loss = batch_loss(&model, &p, Some(&momentum), &pairs, &step_config, &mut rng)?;
                let total = loss.total.item();
                if !total.is_finite() {
                    return Err(PipelineError::Diverged {
                        step: step + 1,
                        value: total,
                    });
                }
                let grads = loss.total.backward()?;
                let row = StepLog {
                    step: step + 1,
                    lr,
                    l_con: loss.contrastive,
                    l_mat: loss.matching,
                    total,
                    tau,
                };
                (row, p.gradients(&grads))
            };
            opt.step(&mut model.params, &grads, lr)?;
            momentum_update(
                &model.params,
                &mut momentum,
                momentum_coefficient(config.momentum, step),
            )?;
            on_step(&row);
            log.push(row);
            step += 1;
        }
        on_epoch(epoch + 1, &model, &momentum)?;
    }
    Ok(TrainOutcome {
        model,
        momentum,
        vocab,
        log,
    })
}

/// Model and momentum tensors in one checkpoint file.
pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    momentum: &ParamStore,
) -> Result<(), PipelineError> {
    let momentum_names: Vec<(String, &Tensor)> = momentum
        .iter()
        .map(|(n, t)| (format!("{MOMENTUM_PREFIX}{n}"), t))
        .collect();
    let all = model
        .params
        .iter()
        .chain(momentum_names.iter().map(|(n, t)| (n.as_str(), *t)));
    checkpoint::save(path, all)?;
    Ok(())
}

/// Stored next to checkpoints so evaluation can rebuild the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedRun {
    pub run: RunConfig,
    pub encoder: EncoderConfig,
}

fn write_log_header(w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "step,lr,L_con,L_mat,total,tau")
}

fn write_log_row(w: &mut impl Write, r: &StepLog) -> std::io::Result<()> {
    writeln!(
        w,
        "{},{:.6e},{:.6},{:.6},{:.6},{:.6}",
        r.step, r.lr, r.l_con, r.l_mat, r.total, r.tau
    )
}

/// Trains from `data_dir`, writing per-epoch checkpoints, the final model,
/// vocabulary, config and the step log into the output dir.
pub fn cmd_train(config: &RunConfig) -> Result<TrainOutcome, PipelineError> {
    config.validate()?;
    let data = data_synth::read_dataset(&config.data_dir, config.image_size)?;
    let graph = load_knowledge(config)?;
    let out = &config.output_dir;
    fs::create_dir_all(out)?;
    let mut log_file = BufWriter::new(File::create(out.join(LOG_FILE))?);
    write_log_header(&mut log_file)?;
    let mut io_error = None;
    let outcome = train(
        config,
        &data,
        graph.as_ref(),
        |row| {
            if io_error.is_none() {
                io_error = write_log_row(&mut log_file, row).err();
            }
        },
        |epoch, model, momentum| {
            save_checkpoint(&out.join(format!("epoch_{epoch:03}.ckpt")), model, momentum)
        },
    );
    log_file.flush()?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    let outcome = outcome?;
    save_checkpoint(&out.join(MODEL_FILE), &outcome.model, &outcome.momentum)?;
    outcome.vocab.save_tokens(&out.join(VOCAB_FILE))?;
    let saved = SavedRun {
        run: config.clone(),
        encoder: outcome.model.config.clone(),
    };
    fs::write(out.join(CONFIG_FILE), serde_json::to_string_pretty(&saved)?)?;
    Ok(outcome)
}

/// Scores and metrics of one evaluation.
pub struct Evaluation {
    pub metrics: RetrievalMetrics,
    /// Texts × images.
    pub t2i: Tensor,
    /// Images × texts.
    pub i2t: Tensor,
    /// Cosine similarities alone, texts × images.
    pub similarity: Tensor,
    pub image_labels: Vec<String>,
    pub text_labels: Vec<String>,
    /// Category of each test image.
    pub image_categories: Vec<String>,
    /// Image index (within the test images) of each text.
    pub image_of_text: Vec<usize>,
}

/// Bidirectional retrieval over one split.
pub fn evaluate(
    model: &Model,
    vocab: &Vocabulary,
    graph: Option<&KnowledgeGraph>,
    config: &RunConfig,
    data: &LoadedDataset,
    split: Split,
) -> Result<Evaluation, PipelineError> {
    let manifest = &data.manifest;
    let images = manifest.indices(split);
    if images.is_empty() {
        return Err(PipelineError::Config(format!("{split} split is empty")));
    }
    let graph_for_text = if model.config.fusion_mode.uses_knowledge() {
        graph
    } else {
        None
    };
    let expander = KnowledgeExpander {
        vocab,
        graph: graph_for_text,
        m: config.m,
        strategy: config.strategy(),
        max_len: model.config.max_text_len,
    };
    let cache = CandidateCache::build(manifest, &images, &expander);
    let mut texts = Vec::new();
    let mut image_of_text = Vec::new();
    let mut text_labels = Vec::new();
    for (local, &img) in images.iter().enumerate() {
        for j in 0..manifest.entries[img].sentences.len() {
            texts.push(text_item(
                &expander,
                &cache,
                manifest,
                img,
                j,
                caption_stream(img, j),
            )?);
            image_of_text.push(local);
            text_labels.push(format!("{}#{j}", manifest.entries[img].filename));
        }
    }
    let pixels: Vec<Tensor> = images.iter().map(|&i| data.images[i].clone()).collect();
    let corpus = retrieval_eval::encode_corpus(model, &pixels, &texts)?;
    let similarity = retrieval_eval::similarity_scores(&corpus.text_feats, &corpus.image_feats)?;
    let (t2i, i2t) = retrieval_eval::score_corpus(model, &corpus, &texts, config.top_k)?;
    let metrics = RetrievalMetrics::compute(&t2i, &i2t, &image_of_text)?;
    Ok(Evaluation {
        metrics,
        t2i,
        i2t,
        similarity,
        image_labels: images
            .iter()
            .map(|&i| manifest.entries[i].filename.clone())
            .collect(),
        text_labels,
        image_categories: images
            .iter()
            .map(|&i| manifest.entries[i].category.clone())
            .collect(),
        image_of_text,
    })
}

/// One image and its first caption per category (first test image of each
/// category, in order of appearance): categories × categories similarities.
pub fn category_similarity(eval: &Evaluation) -> (Tensor, Vec<String>) {
    let mut first_image: Vec<(String, usize)> = Vec::new();
    for (i, c) in eval.image_categories.iter().enumerate() {
        if !first_image.iter().any(|(k, _)| k == c) {
            first_image.push((c.clone(), i));
        }
    }
    let first_text: HashMap<usize, usize> = eval
        .image_of_text
        .iter()
        .enumerate()
        .rev()
        .map(|(t, &img)| (img, t))
        .collect();
    let n = first_image.len();
    let mut s = Tensor::zeros(&[n, n]);
    for (r, (_, img_r)) in first_image.iter().enumerate() {
        let t = first_text[img_r];
        for (c, (_, img_c)) in first_image.iter().enumerate() {
            s.row_mut(r)[c] = eval.similarity.get2(t, *img_c);
        }
    }
    (s, first_image.into_iter().map(|(k, _)| k).collect())
}

/// Rebuilds a trained model from a run directory (config, vocab, weights).
pub fn load_trained(
    config: &RunConfig,
    graph: Option<&KnowledgeGraph>,
) -> Result<(Model, Vocabulary, SavedRun), PipelineError> {
    let ckpt = config.checkpoint_path();
    let dir = ckpt.parent().map(Path::to_path_buf).unwrap_or_default();
    let saved: SavedRun = serde_json::from_str(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
    let vocab = restore_vocabulary(&dir.join(VOCAB_FILE), graph)?;
    if vocab.len() != saved.encoder.vocab_size {
        return Err(PipelineError::Config(format!(
            "vocabulary has {} ids but the checkpoint expects {}",
            vocab.len(),
            saved.encoder.vocab_size
        )));
    }
    let mut model = Model::new(saved.encoder.clone(), 0)?;
    model.load_params(&ckpt)?;
    Ok((model, vocab, saved))
}

/// Evaluates the checkpoint on the test split, writing `metrics.json` and,
/// if asked, the score matrix and a per-category similarity matrix.
pub fn cmd_eval(config: &RunConfig) -> Result<RetrievalMetrics, PipelineError> {
    let graph = load_knowledge(config)?;
    let (model, vocab, saved) = load_trained(config, graph.as_ref())?;
    let data = data_synth::read_dataset(&config.data_dir, saved.encoder.image_size)?;
    let run = RunConfig {
        m: config.m,
        strategy: config.strategy,
        seed: config.seed,
        top_k: config.top_k,
        ..saved.run
    };
    let eval = evaluate(&model, &vocab, graph.as_ref(), &run, &data, Split::Test)?;
    fs::create_dir_all(&config.output_dir)?;
    fs::write(
        config.output_dir.join(METRICS_FILE),
        format!("{}\n", eval.metrics.to_json_line()),
    )?;
    if let Some(path) = &config.export_sim {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        retrieval_eval::export_similarity_csv(
            &eval.t2i,
            &eval.text_labels,
            &eval.image_labels,
            path,
        )?;
        let (cat, labels) = category_similarity(&eval);
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("similarity");
        let cat_path = path.with_file_name(format!("{stem}_categories.csv"));
        retrieval_eval::export_similarity_csv(&cat, &labels, &labels, &cat_path)?;
    }
    Ok(eval.metrics)
}

/// Writes a synthetic corpus (images, manifest, knowledge graph) to `dir`.
pub fn cmd_gen_data(dir: &Path, synth: &SynthConfig) -> Result<DatasetManifest, PipelineError> {
    let data = data_synth::generate_with(synth)?;
    data_synth::write_dataset(&data, dir)?;
    Ok(data.manifest)
}
