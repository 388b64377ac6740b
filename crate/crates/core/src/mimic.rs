//! Few-shot embedding induction by mimicking.
//!
//! An expression's vector is predicted from two sources. The form path
//! averages learned character n-gram vectors of `<words_joined_by_underscore>`
//! and projects them to the encoder width. The context path runs the frozen
//! encoder over each example line with the expression collapsed to a single
//! position whose input embedding is supplied from outside, reads the
//! final-layer output there and maps it linearly back into the input
//! embedding space. A learned scorer turns the per-context vectors into
//! softmax weights and the weighted sum is the embedding.
//!
//! Training regresses onto the input embeddings of frequent single-token
//! words in three stages: context only (with a learned placeholder input),
//! form only, then both (form vector as the encoder input).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::extraction::{ContextRecord, ContextSet};
use crate::nn::{self, Adam, AdamConfig, Matrix, Tape, Var};
use crate::registry::{MweEntry, TokenId};
use crate::tokenizer::{tokenize_with_entries, Token, WordPiece};

pub const DEFAULT_N_MIN: usize = 3;
pub const DEFAULT_N_MAX: usize = 5;
const CONTEXT_PROJECTION_STD: f64 = 0.1;

/// Character n-grams of `<w1_w2_..>`, one per position, shortest first.
pub fn char_ngrams(surface: &str, n_min: usize, n_max: usize) -> Vec<String> {
    let joined: Vec<String> = surface.split_whitespace().map(str::to_lowercase).collect();
    let marked: Vec<char> = format!("<{}>", joined.join("_")).chars().collect();
    let mut out = Vec::new();
    for n in n_min..=n_max {
        for start in 0..marked.len().saturating_sub(n - 1) {
            out.push(marked[start..start + n].iter().collect());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormEmbedder {
    pub ngram_index: BTreeMap<String, usize>,
    /// One row per n-gram in `ngram_index`.
    pub table: Matrix,
    pub n_min: usize,
    pub n_max: usize,
    /// `d_form × d_model`, no bias, so an empty mean maps to zero.
    pub projection: Matrix,
}

impl FormEmbedder {
    /// Builds the n-gram inventory from `words` (each treated as a surface).
    pub fn new<'w>(
        words: impl IntoIterator<Item = &'w str>,
        n_min: usize,
        n_max: usize,
        d_form: usize,
        d_model: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if n_min == 0 || n_min > n_max {
            return Err(Error::InvalidArgument(format!("n-gram range {n_min}..={n_max}")));
        }
        let mut ngram_index = BTreeMap::new();
        for w in words {
            for g in char_ngrams(w, n_min, n_max) {
                let next = ngram_index.len();
                ngram_index.entry(g).or_insert(next);
            }
        }
        Ok(Self {
            table: Matrix::randn(ngram_index.len(), d_form, 0.1, rng),
            ngram_index,
            n_min,
            n_max,
            projection: Matrix::randn(d_form, d_model, (1.0 / d_form as f64).sqrt(), rng),
        })
    }

    pub fn d_model(&self) -> usize {
        self.projection.cols()
    }

    /// Table rows of every in-table n-gram occurrence.
    pub fn ngram_rows(&self, surface: &str) -> Vec<usize> {
        char_ngrams(surface, self.n_min, self.n_max)
            .iter()
            .filter_map(|g| self.ngram_index.get(g).copied())
            .collect()
    }

    fn var(&self, tape: &mut Tape<'_>, table: Var, projection: Var, rows: &[usize]) -> Option<Var> {
        if rows.is_empty() {
            return None;
        }
        let picked = tape.gather(table, rows);
        let mean = tape.mean_rows(picked);
        Some(tape.matmul(mean, projection))
    }
}

/// Projected mean of the in-table n-gram vectors of `surface`; zero when none
/// of its n-grams are known.
pub fn form_embedding(surface: &str, form: &FormEmbedder) -> Result<Vec<f64>> {
    if surface.trim().is_empty() {
        return Err(Error::InvalidArgument("empty surface".into()));
    }
    let rows = form.ngram_rows(surface);
    let mut tape = Tape::new();
    let table = tape.constant(&form.table);
    let proj = tape.constant(&form.projection);
    Ok(match form.var(&mut tape, table, proj, &rows) {
        Some(v) => tape.value(v).data().to_vec(),
        None => vec![0.0; form.d_model()],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextScorer {
    /// `d_model × 1`; score(v) = v · w.
    pub weights: Matrix,
}

impl ContextScorer {
    pub fn score(&self, v: &[f64]) -> f64 {
        nn::dot(v, self.weights.data())
    }
}

fn fuse_var(tape: &mut Tape<'_>, outputs: Var, scorer: Var) -> (Var, Var) {
    let scores = tape.matmul(outputs, scorer);
    let scores = tape.transpose(scores);
    let weights = tape.softmax_rows(scores);
    let fused = tape.matmul(weights, outputs);
    (weights, fused)
}

/// Softmax attention over context vectors: returns the weights and the
/// weighted sum.
pub fn fuse_contexts(vectors: &[Vec<f64>], scorer: &ContextScorer) -> Result<(Vec<f64>, Vec<f64>)> {
    let Some(first) = vectors.first() else {
        return Err(Error::InvalidArgument("no context vectors to fuse".into()));
    };
    let d = first.len();
    if let Some(bad) = vectors.iter().find(|v| v.len() != d) {
        return Err(Error::DimMismatch {
            expected: d,
            actual: bad.len(),
        });
    }
    if scorer.weights.rows() != d {
        return Err(Error::DimMismatch {
            expected: scorer.weights.rows(),
            actual: d,
        });
    }
    let m = Matrix::from_vec(vectors.len(), d, vectors.concat());
    let mut tape = Tape::new();
    let outputs = tape.constant(&m);
    let w = tape.constant(&scorer.weights);
    let (weights, fused) = fuse_var(&mut tape, outputs, w);
    Ok((tape.value(weights).data().to_vec(), tape.value(fused).data().to_vec()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub context_epochs: usize,
    pub form_epochs: usize,
    pub combined_epochs: usize,
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self {
            context_epochs: 3,
            form_epochs: 10,
            combined_epochs: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    ContextOnly,
    FormOnly,
    Combined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MimicModel {
    pub form: FormEmbedder,
    pub scorer: ContextScorer,
    /// Placeholder input embedding used by the context-only stage.
    pub mask_input: Matrix,
    /// `d_model × d_model`, maps encoder outputs into the embedding space.
    pub context_projection: Matrix,
    pub schedule: StageSchedule,
    /// Fingerprint of the frozen encoder this model was built against.
    pub encoder_fingerprint: String,
}

/// Gradients for the mimicking parameters, in [`MimicModel::tensors`] order.
#[derive(Debug, Clone)]
pub struct MimicGrads {
    pub table: Option<Matrix>,
    pub projection: Option<Matrix>,
    pub scorer: Option<Matrix>,
    pub mask_input: Option<Matrix>,
    pub context_projection: Option<Matrix>,
}

impl MimicGrads {
    fn into_vec(self) -> Vec<Option<Matrix>> {
        vec![
            self.table,
            self.projection,
            self.scorer,
            self.mask_input,
            self.context_projection,
        ]
    }
}

/// A context line prepared for the context path: token ids with the target
/// collapsed to `position` (its id there is a placeholder).
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedContext {
    pub ids: Vec<TokenId>,
    pub position: usize,
}

impl PreparedContext {
    /// Keeps at most `max_len` tokens in a window centred on the target.
    pub fn truncated(mut self, max_len: usize) -> Self {
        if self.ids.len() > max_len {
            let start = self
                .position
                .saturating_sub(max_len / 2)
                .min(self.ids.len() - max_len);
            self.ids = self.ids[start..start + max_len].to_vec();
            self.position -= start;
        }
        self
    }
}

/// Tokenizes a context with `entry` as one position.
pub fn prepare_mwe_context(text: &str, entry: &MweEntry, tokenizer: &WordPiece, max_len: usize) -> Result<PreparedContext> {
    let tokens = tokenize_with_entries(text, std::slice::from_ref(entry), tokenizer);
    let position = tokens.iter().position(Token::is_mwe).ok_or_else(|| Error::MatchLost {
        token_name: entry.token_name.clone(),
        text: text.to_string(),
    })?;
    let placeholder = tokenizer.mask_id();
    let ids = tokens.iter().map(|t| t.id().unwrap_or(placeholder)).collect();
    Ok(PreparedContext { ids, position }.truncated(max_len))
}

/// Tokenizes a context of a single-token word, locating its first occurrence.
pub fn prepare_word_context(text: &str, word_id: TokenId, tokenizer: &WordPiece, max_len: usize) -> Result<PreparedContext> {
    let ids = tokenizer.encode(text);
    let position = ids.iter().position(|&i| i == word_id).ok_or_else(|| Error::MatchLost {
        token_name: tokenizer.piece(word_id).unwrap_or_default().to_string(),
        text: text.to_string(),
    })?;
    Ok(PreparedContext { ids, position }.truncated(max_len))
}

/// Id of `word` when the tokenizer keeps it as one ordinary token.
pub fn single_token_id(word: &str, tokenizer: &WordPiece) -> Result<TokenId> {
    match tokenizer.tokenize(word).as_slice() {
        [(id, _)] if *id != tokenizer.unk_id() && !tokenizer.is_special(*id) => Ok(*id),
        _ => Err(Error::NotMimickable(word.to_string())),
    }
}

fn context_path(tape: &mut Tape<'_>, encoder: &Encoder, bound: &crate::encoder::BoundEncoder, ctx: &PreparedContext, input: Var) -> Var {
    let mut parts = Vec::with_capacity(3);
    if ctx.position > 0 {
        parts.push(encoder.embed_ids(tape, bound, &ctx.ids[..ctx.position]));
    }
    parts.push(input);
    if ctx.position + 1 < ctx.ids.len() {
        parts.push(encoder.embed_ids(tape, bound, &ctx.ids[ctx.position + 1..]));
    }
    let x = tape.concat_rows(&parts);
    let h = encoder.forward(tape, bound, x);
    tape.row(h, ctx.position)
}

/// Encoder output at the target position of a prepared context, with
/// `input_vector` as the target's input embedding.
pub fn prepared_context_embedding(ctx: &PreparedContext, encoder: &Encoder, input_vector: &[f64]) -> Result<Vec<f64>> {
    if input_vector.len() != encoder.d_model() {
        return Err(Error::DimMismatch {
            expected: encoder.d_model(),
            actual: input_vector.len(),
        });
    }
    let input = Matrix::row_vector(input_vector.to_vec());
    let mut tape = Tape::new();
    let bound = encoder.bind(&mut tape, false);
    let iv = tape.constant(&input);
    let out = context_path(&mut tape, encoder, &bound, ctx, iv);
    Ok(tape.value(out).data().to_vec())
}

pub fn context_embedding(context: &ContextRecord, entry: &MweEntry, encoder: &Encoder, input_vector: &[f64]) -> Result<Vec<f64>> {
    let ctx = prepare_mwe_context(&context.text, entry, &encoder.tokenizer, encoder.config.max_len)?;
    prepared_context_embedding(&ctx, encoder, input_vector)
}

/// One gold word with its prepared contexts.
#[derive(Debug, Clone)]
pub struct MimicExample {
    pub word: String,
    pub gold: Matrix,
    pub contexts: Vec<PreparedContext>,
}

impl MimicExample {
    /// Gold vector is the word's current input embedding. Contexts where the
    /// word does not survive tokenization are skipped.
    pub fn new(word: &str, contexts: &ContextSet, encoder: &Encoder) -> Result<Self> {
        let id = single_token_id(word, &encoder.tokenizer)?;
        let prepared: Vec<PreparedContext> = contexts
            .records
            .iter()
            .filter_map(|r| prepare_word_context(&r.text, id, &encoder.tokenizer, encoder.config.max_len).ok())
            .collect();
        if prepared.is_empty() {
            return Err(Error::InvalidArgument(format!("no usable context for {word:?}")));
        }
        Ok(Self {
            word: word.to_string(),
            gold: Matrix::row_vector(encoder.embedding_row(id).to_vec()),
            contexts: prepared,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MimicTrainConfig {
    pub schedule: StageSchedule,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MimicTrainConfig {
    fn default() -> Self {
        Self {
            schedule: StageSchedule::default(),
            optimizer: AdamConfig::with_lr(1e-3),
            batch_size: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLosses {
    /// Full-set loss before the first update of the stage.
    pub initial: Option<f64>,
    /// Full-set loss after each epoch.
    pub epochs: Vec<f64>,
}

impl StageLosses {
    pub fn last(&self) -> Option<f64> {
        self.epochs.last().copied().or(self.initial)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MimicTrainReport {
    pub context_only: StageLosses,
    pub form_only: StageLosses,
    pub combined: StageLosses,
}

impl MimicModel {
    pub fn new(encoder: &Encoder, form_words: &[&str], d_form: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = encoder.d_model();
        let form = FormEmbedder::new(form_words.iter().copied(), DEFAULT_N_MIN, DEFAULT_N_MAX, d_form, d, &mut rng)?;
        Ok(Self {
            form,
            scorer: ContextScorer {
                weights: Matrix::randn(d, 1, 0.1, &mut rng),
            },
            mask_input: Matrix::randn(1, d, 0.1, &mut rng),
            context_projection: Matrix::randn(d, d, CONTEXT_PROJECTION_STD / (d as f64).sqrt(), &mut rng),
            schedule: StageSchedule::default(),
            encoder_fingerprint: encoder.fingerprint(),
        })
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        vec![
            &self.form.table,
            &self.form.projection,
            &self.scorer.weights,
            &self.mask_input,
            &self.context_projection,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.form.table,
            &mut self.form.projection,
            &mut self.scorer.weights,
            &mut self.mask_input,
            &mut self.context_projection,
        ]
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.encoder_fingerprint.as_bytes());
        for (g, i) in &self.form.ngram_index {
            h.update(g.as_bytes());
            h.update((*i as u64).to_le_bytes());
        }
        for m in self.tensors() {
            for v in m.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..16])
    }

    /// Maps raw context outputs through the context projection.
    pub fn project_contexts(&self, vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
        vectors
            .iter()
            .map(|v| Matrix::row_vector(v.clone()).matmul(&self.context_projection).into_vec())
            .collect()
    }

    fn check_encoder(&self, encoder: &Encoder) -> Result<()> {
        if encoder.d_model() != self.form.d_model() {
            return Err(Error::DimMismatch {
                expected: self.form.d_model(),
                actual: encoder.d_model(),
            });
        }
        Ok(())
    }

    /// Builds the prediction for one example on `tape`.
    fn predict_var<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        encoder: &'a Encoder,
        bound: &crate::encoder::BoundEncoder,
        params: &[Var; 5],
        example: &MimicExample,
        stage: Stage,
    ) -> Var {
        let [table, projection, scorer, mask, ctx_proj] = *params;
        let form = || self.form.ngram_rows(&example.word);
        match stage {
            Stage::FormOnly => {
                let rows = form();
                self.form
                    .var(tape, table, projection, &rows)
                    .unwrap_or_else(|| tape.owned_constant(Matrix::zeros(1, self.form.d_model())))
            }
            Stage::ContextOnly | Stage::Combined => {
                let input = if stage == Stage::ContextOnly {
                    mask
                } else {
                    let rows = form();
                    self.form
                        .var(tape, table, projection, &rows)
                        .unwrap_or_else(|| tape.owned_constant(Matrix::zeros(1, self.form.d_model())))
                };
                let outs: Vec<Var> = example
                    .contexts
                    .iter()
                    .map(|c| context_path(tape, encoder, bound, c, input))
                    .collect();
                let stacked = tape.concat_rows(&outs);
                let projected = tape.matmul(stacked, ctx_proj);
                fuse_var(tape, projected, scorer).1
            }
        }
    }

    fn trainable(stage: Stage) -> [bool; 5] {
        match stage {
            Stage::ContextOnly => [false, false, true, true, true],
            Stage::FormOnly => [true, true, false, false, false],
            Stage::Combined => [true; 5],
        }
    }

    /// Mean mimicking loss over `examples` and, when `with_grads`, the
    /// gradients of that mean.
    fn loss_inner(&self, encoder: &Encoder, examples: &[&MimicExample], stage: Stage, with_grads: bool) -> (f64, Option<MimicGrads>) {
        let mut tape = Tape::new();
        let bound = encoder.bind(&mut tape, false);
        let flags = if with_grads { Self::trainable(stage) } else { [false; 5] };
        let tensors = self.tensors();
        let params: [Var; 5] = std::array::from_fn(|i| tape.leaf(tensors[i], flags[i]));
        let losses: Vec<Var> = examples
            .iter()
            .map(|ex| {
                let pred = self.predict_var(&mut tape, encoder, &bound, &params, ex, stage);
                tape.mse(pred, &ex.gold)
            })
            .collect();
        let sum = tape.sum(&losses);
        let loss = tape.scale(sum, 1.0 / losses.len() as f64);
        let value = tape.scalar(loss);
        let grads = with_grads.then(|| {
            let g = tape.backward(loss);
            MimicGrads {
                table: g.get(params[0]).cloned(),
                projection: g.get(params[1]).cloned(),
                scorer: g.get(params[2]).cloned(),
                mask_input: g.get(params[3]).cloned(),
                context_projection: g.get(params[4]).cloned(),
            }
        });
        (value, grads)
    }

    /// Mean squared error between predictions and gold vectors for `stage`.
    pub fn loss(&self, encoder: &Encoder, examples: &[MimicExample], stage: Stage) -> f64 {
        let refs: Vec<&MimicExample> = examples.iter().collect();
        self.loss_inner(encoder, &refs, stage, false).0
    }

    pub fn gradients(&self, encoder: &Encoder, examples: &[MimicExample], stage: Stage) -> MimicGrads {
        let refs: Vec<&MimicExample> = examples.iter().collect();
        self.loss_inner(encoder, &refs, stage, true).1.expect("gradients requested")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&json)?)
    }
}

/// Runs the context-only, form-only and combined stages in order. The
/// encoder is only borrowed, so its weights cannot change.
pub fn mimic_train(
    model: &MimicModel,
    encoder: &Encoder,
    examples: &[MimicExample],
    config: &MimicTrainConfig,
) -> Result<(MimicModel, MimicTrainReport)> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("empty mimicking training set".into()));
    }
    model.check_encoder(encoder)?;
    if let Some(bad) = examples.iter().find(|e| e.contexts.is_empty()) {
        return Err(Error::InvalidArgument(format!("{:?} has no contexts", bad.word)));
    }
    let mut model = model.clone();
    model.schedule = config.schedule;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = MimicTrainReport::default();
    let stages = [
        (Stage::ContextOnly, config.schedule.context_epochs),
        (Stage::FormOnly, config.schedule.form_epochs),
        (Stage::Combined, config.schedule.combined_epochs),
    ];
    for (stage, epochs) in stages {
        let losses = match stage {
            Stage::ContextOnly => &mut report.context_only,
            Stage::FormOnly => &mut report.form_only,
            Stage::Combined => &mut report.combined,
        };
        if epochs == 0 {
            continue;
        }
        losses.initial = Some(model.loss(encoder, examples, stage));
        let mut adam = Adam::new(config.optimizer.clone());
        let mut order: Vec<usize> = (0..examples.len()).collect();
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(config.batch_size.max(1)) {
                let refs: Vec<&MimicExample> = batch.iter().map(|&i| &examples[i]).collect();
                let (_, grads) = model.loss_inner(encoder, &refs, stage, true);
                let grads = grads.expect("gradients requested").into_vec();
                adam.step(model.tensors_mut(), &grads);
            }
            losses.epochs.push(model.loss(encoder, examples, stage));
        }
        log::info!("mimic stage {stage:?}: {:?} -> {:?}", losses.initial, losses.last());
    }
    Ok((model, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CreatedFrom {
    Auto,
    Gold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedEmbedding {
    pub mwe_token_name: String,
    pub vector: Vec<f32>,
    pub num_contexts: usize,
    pub model_fingerprint: String,
    pub created_from: CreatedFrom,
}

/// Form vector as the encoder input, one context embedding per record,
/// attentive fusion over them.
pub fn infer_embedding(
    entry: &MweEntry,
    contexts: &ContextSet,
    model: &MimicModel,
    encoder: &Encoder,
    created_from: CreatedFrom,
) -> Result<TrainedEmbedding> {
    if contexts.is_empty() {
        return Err(Error::InvalidArgument(format!("no contexts for {}", entry.token_name)));
    }
    model.check_encoder(encoder)?;
    let input = form_embedding(&entry.surface, &model.form)?;
    let vectors = contexts
        .records
        .iter()
        .map(|r| context_embedding(r, entry, encoder, &input))
        .collect::<Result<Vec<_>>>()?;
    let (_, fused) = fuse_contexts(&model.project_contexts(&vectors), &model.scorer)?;
    Ok(TrainedEmbedding {
        mwe_token_name: entry.token_name.clone(),
        vector: fused.iter().map(|&v| v as f32).collect(),
        num_contexts: contexts.len(),
        model_fingerprint: model.fingerprint(),
        created_from,
    })
}

/// Frequent single-token words, skipping the `skip_top` most frequent.
/// Ties in frequency are broken alphabetically.
pub fn select_gold_words<'l>(
    lines: impl IntoIterator<Item = &'l str>,
    tokenizer: &WordPiece,
    min_frequency: usize,
    skip_top: usize,
) -> Vec<String> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for line in lines {
        for word in WordPiece::pre_tokenize(line) {
            if !word.chars().all(char::is_alphanumeric) {
                continue;
            }
            *counts.entry(word).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(w, _)| single_token_id(w, tokenizer).is_ok())
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked
        .into_iter()
        .skip(skip_top)
        .filter(|(_, c)| *c >= min_frequency)
        .map(|(w, _)| w)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    token_name: String,
    num_contexts: usize,
    created_from: CreatedFrom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BundleManifest {
    model_fingerprint: String,
    dimension: usize,
    entries: Vec<ManifestEntry>,
}

pub const BUNDLE_MANIFEST: &str = "manifest.json";
pub const BUNDLE_VECTORS: &str = "vectors.f32";

/// Learned vectors keyed by token name, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    pub model_fingerprint: String,
    pub dimension: usize,
    pub entries: Vec<TrainedEmbedding>,
}

impl EmbeddingBundle {
    pub fn new(model_fingerprint: String, dimension: usize, entries: Vec<TrainedEmbedding>) -> Result<Self> {
        for e in &entries {
            if e.vector.len() != dimension {
                return Err(Error::DimMismatch {
                    expected: dimension,
                    actual: e.vector.len(),
                });
            }
            if !e.vector.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidArgument(format!("non-finite vector for {}", e.mwe_token_name)));
            }
        }
        Ok(Self {
            model_fingerprint,
            dimension,
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Writes `manifest.json` and `vectors.f32` (row-major little-endian f32).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = BundleManifest {
            model_fingerprint: self.model_fingerprint.clone(),
            dimension: self.dimension,
            entries: self
                .entries
                .iter()
                .map(|e| ManifestEntry {
                    token_name: e.mwe_token_name.clone(),
                    num_contexts: e.num_contexts,
                    created_from: e.created_from,
                })
                .collect(),
        };
        let path = dir.join(BUNDLE_MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
        let bytes: Vec<u8> = self
            .entries
            .iter()
            .flat_map(|e| e.vector.iter().flat_map(|v| v.to_le_bytes()))
            .collect();
        let path = dir.join(BUNDLE_VECTORS);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(BUNDLE_MANIFEST);
        let json = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: BundleManifest = serde_json::from_str(&json)?;
        let path = dir.join(BUNDLE_VECTORS);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let expected = manifest.entries.len() * manifest.dimension * 4;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "{} holds {} bytes, manifest implies {expected}",
                path.display(),
                bytes.len()
            )));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let entries = manifest
            .entries
            .into_iter()
            .zip(values.chunks(manifest.dimension.max(1)))
            .map(|(m, row)| TrainedEmbedding {
                mwe_token_name: m.token_name,
                vector: row.to_vec(),
                num_contexts: m.num_contexts,
                model_fingerprint: manifest.model_fingerprint.clone(),
                created_from: m.created_from,
            })
            .collect();
        Self::new(manifest.model_fingerprint, manifest.dimension, entries)
    }
}
