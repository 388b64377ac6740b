//! End-to-end runs: mine, sample, curate, infer, inject, train, evaluate.
//!
//! Every stage output lives in a cache directory under a key derived from the
//! stage name, its parameters and the content hashes of its inputs. A stage
//! whose key already has a verified artifact is skipped. The run manifest in
//! the output directory lists every artifact with its key and content hash.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::Encoder;
use crate::error::{Error, Result, StageExt};
use crate::eval::{evaluate, idiom_of_pairs, per_idiom_analysis, EvalReport, DEFAULT_MIN_OCCURRENCES};
use crate::extraction::{
    apply_curation, extract_contexts, extract_pattern, gold_sample, retain_matchable, sample_contexts, ContextSet,
    ExtractOptions, DEFAULT_CONTEXTS_PER_IDIOM, DEFAULT_MAX_MATCHES,
};
use crate::injection::{inject_embeddings, injected_view};
use crate::mimic::{
    infer_embedding, mimic_train, select_gold_words, CreatedFrom, EmbeddingBundle, MimicExample, MimicModel,
    MimicTrainConfig, StageSchedule, TrainedEmbedding,
};
use crate::nn::AdamConfig;
use crate::registry::{Language, MweEntry, MweRegistry};
use crate::sts::{load_sts_tsv, predict_scores, train_sts, Regime, ScoreScale, StsPair, TrainConfig};

/// Environment variable the command-line tool reads the cache directory from.
pub const CACHE_DIR_ENV: &str = "MWE_CACHE_DIR";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.json";
const HASH_FILE: &str = ".sha256";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Pretrain,
    Finetune,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::Pretrain => "pretrain",
            Setting::Finetune => "finetune",
        })
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pretrain" | "pre-train" => Ok(Setting::Pretrain),
            "finetune" | "fine-tune" => Ok(Setting::Finetune),
            other => Err(Error::InvalidArgument(format!("unknown setting {other:?}"))),
        }
    }
}

/// Mimicking model training inside the pipeline, used when no trained model
/// is supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MimicSettings {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Width of the n-gram vectors; the encoder width when unset.
    pub d_form: Option<usize>,
    pub gold_min_frequency: usize,
    pub gold_skip_top: usize,
    pub max_gold_words: Option<usize>,
    pub contexts_per_word: usize,
}

impl Default for MimicSettings {
    fn default() -> Self {
        Self {
            learning_rate: 3e-5,
            batch_size: 4,
            d_form: None,
            gold_min_frequency: 100,
            gold_skip_top: 100,
            max_gold_words: None,
            contexts_per_word: 20,
        }
    }
}

fn default_contexts() -> usize {
    DEFAULT_CONTEXTS_PER_IDIOM
}
fn default_max_matches() -> usize {
    DEFAULT_MAX_MATCHES
}
fn default_finetune_epochs() -> usize {
    1
}
fn default_sts_lr() -> f64 {
    2e-5
}
fn default_sts_batch() -> usize {
    16
}
fn default_min_occurrences() -> usize {
    DEFAULT_MIN_OCCURRENCES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub language: Language,
    pub corpus_path: PathBuf,
    pub registry_path: PathBuf,
    /// Base encoder checkpoint (tokenizer included).
    pub encoder_path: PathBuf,
    /// General STS training pairs for the pre-train setting.
    pub sts_train_path: PathBuf,
    /// Additional training pairs for the fine-tune setting.
    #[serde(default)]
    pub sts_finetune_path: Option<PathBuf>,
    pub sts_eval_path: PathBuf,
    #[serde(default)]
    pub score_scale: ScoreScale,
    /// Trained mimicking model; one is trained from the corpus when unset.
    #[serde(default)]
    pub mimic_model_path: Option<PathBuf>,
    /// Directory of `<token_name>.jsonl` annotation files. Curated idioms
    /// are sampled from their accepted lines and marked as gold.
    #[serde(default)]
    pub curation_dir: Option<PathBuf>,
    #[serde(default = "default_contexts")]
    pub contexts_per_idiom: usize,
    #[serde(default = "default_max_matches")]
    pub max_matches: usize,
    #[serde(default)]
    pub mimic_schedule: StageSchedule,
    #[serde(default)]
    pub mimic: MimicSettings,
    /// 35 for English and 45 for Portuguese and Galician when unset.
    #[serde(default)]
    pub pretrain_epochs: Option<usize>,
    #[serde(default = "default_finetune_epochs")]
    pub finetune_epochs: usize,
    #[serde(default = "default_sts_lr")]
    pub sts_learning_rate: f64,
    #[serde(default = "default_sts_batch")]
    pub sts_batch_size: usize,
    #[serde(default = "default_min_occurrences")]
    pub min_idiom_occurrences: usize,
    /// Runs per-idiom inference on worker threads.
    #[serde(default)]
    pub parallel_inference: bool,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    /// `<output_dir>/cache` when unset.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn new(
        language: Language,
        corpus_path: impl Into<PathBuf>,
        registry_path: impl Into<PathBuf>,
        encoder_path: impl Into<PathBuf>,
        sts_train_path: impl Into<PathBuf>,
        sts_eval_path: impl Into<PathBuf>,
        output_dir: impl Into<PathBuf>,
    ) -> Self {
        Self {
            language,
            corpus_path: corpus_path.into(),
            registry_path: registry_path.into(),
            encoder_path: encoder_path.into(),
            sts_train_path: sts_train_path.into(),
            sts_finetune_path: None,
            sts_eval_path: sts_eval_path.into(),
            score_scale: ScoreScale::Auto,
            mimic_model_path: None,
            curation_dir: None,
            contexts_per_idiom: DEFAULT_CONTEXTS_PER_IDIOM,
            max_matches: DEFAULT_MAX_MATCHES,
            mimic_schedule: StageSchedule::default(),
            mimic: MimicSettings::default(),
            pretrain_epochs: None,
            finetune_epochs: 1,
            sts_learning_rate: default_sts_lr(),
            sts_batch_size: default_sts_batch(),
            min_idiom_occurrences: DEFAULT_MIN_OCCURRENCES,
            parallel_inference: false,
            seed: 0,
            output_dir: output_dir.into(),
            cache_dir: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: Self = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.contexts_per_idiom == 0 || self.contexts_per_idiom > self.max_matches {
            return Err(Error::InvalidArgument(format!(
                "contexts_per_idiom {} must be in 1..={}",
                self.contexts_per_idiom, self.max_matches
            )));
        }
        let paths = [
            ("corpus_path", Some(&self.corpus_path)),
            ("registry_path", Some(&self.registry_path)),
            ("encoder_path", Some(&self.encoder_path)),
            ("sts_train_path", Some(&self.sts_train_path)),
            ("sts_eval_path", Some(&self.sts_eval_path)),
            ("output_dir", Some(&self.output_dir)),
            ("sts_finetune_path", self.sts_finetune_path.as_ref()),
            ("mimic_model_path", self.mimic_model_path.as_ref()),
            ("curation_dir", self.curation_dir.as_ref()),
            ("cache_dir", self.cache_dir.as_ref()),
        ];
        for (name, path) in paths {
            if path.is_some_and(|p| p.as_os_str().is_empty()) {
                return Err(Error::InvalidArgument(format!("{name} is empty")));
            }
        }
        Ok(())
    }

    pub fn pretrain_epochs(&self) -> usize {
        self.pretrain_epochs
            .unwrap_or_else(|| TrainConfig::pretrain(self.language).epochs)
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.output_dir.join("cache"))
    }

    fn sts_config(&self, epochs: usize, regime: Regime) -> TrainConfig {
        TrainConfig {
            epochs,
            learning_rate: self.sts_learning_rate,
            batch_size: self.sts_batch_size,
            seed: self.seed,
            regime,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub stage: String,
    pub key: String,
    /// Relative to the cache directory.
    pub path: PathBuf,
    pub sha256: String,
    pub cache_hit: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub setting: Option<Setting>,
    pub inputs: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, ArtifactRecord>,
}

impl RunManifest {
    pub fn hits(&self) -> usize {
        self.artifacts.values().filter(|a| a.cache_hit).count()
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: EvalReport,
    pub manifest: RunManifest,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content hash of a file, or of a directory as its sorted
/// `(name, file hash)` list. Hidden entries are ignored.
pub fn hash_path(path: &Path) -> Result<String> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_file() {
        return Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?));
    }
    let mut names: Vec<String> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| !n.starts_with('.'))
        .collect();
    names.sort();
    let mut h = Sha256::new();
    for n in names {
        h.update(n.as_bytes());
        h.update([0]);
        h.update(hash_path(&path.join(&n))?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

struct Store {
    root: PathBuf,
    manifest: RunManifest,
}

impl Store {
    /// Returns the artifact directory for `stage` and `params`, running
    /// `produce` into a fresh directory unless a verified copy exists.
    fn cached(
        &mut self,
        stage: &str,
        label: &str,
        params: &serde_json::Value,
        produce: impl FnOnce(&Path) -> Result<()>,
    ) -> Result<(PathBuf, String)> {
        let key = sha256_hex(format!("{stage}\n{params}").as_bytes());
        let rel = PathBuf::from(stage).join(&key);
        let dir = self.root.join(&rel);
        let stored = fs::read_to_string(dir.join(HASH_FILE)).ok();
        let verified = match &stored {
            Some(h) => hash_path(&dir).map(|actual| actual == h.trim()).unwrap_or(false),
            None => false,
        };
        let cache_hit = verified;
        if !verified {
            let tmp = self.root.join(stage).join(format!("{key}.tmp"));
            for d in [&tmp, &dir] {
                if d.exists() {
                    fs::remove_dir_all(d).map_err(|e| Error::io(d, e))?;
                }
            }
            fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
            produce(&tmp)?;
            let hash = hash_path(&tmp)?;
            fs::write(tmp.join(HASH_FILE), &hash).map_err(|e| Error::io(&tmp, e))?;
            fs::rename(&tmp, &dir).map_err(|e| Error::io(&dir, e))?;
        } else {
            log::info!("{label}: cache hit");
        }
        let sha256 = hash_path(&dir)?;
        self.manifest.artifacts.insert(
            label.to_string(),
            ArtifactRecord {
                stage: stage.to_string(),
                key,
                path: rel,
                sha256: sha256.clone(),
                cache_hit,
            },
        );
        Ok((dir, sha256))
    }
}

fn read_lines_lossy(path: &Path) -> Result<Vec<String>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(String::from_utf8_lossy(&bytes).lines().map(str::to_string).collect())
}

struct Sampled {
    entry: MweEntry,
    dir: PathBuf,
    hash: String,
    curated: bool,
}

const CONTEXTS_FILE: &str = "contexts.jsonl";
const MODEL_FILE: &str = "mimic.json";
const BUNDLE_DIR: &str = "bundle";
const ENCODER_FILE: &str = "encoder.json";
const HISTORY_FILE: &str = "history.json";

/// Runs the whole chain for `setting` and writes the report and manifest to
/// the output directory.
pub fn run_pipeline(config: &PipelineConfig, setting: Setting) -> Result<EvalReport> {
    Ok(run_pipeline_with_manifest(config, setting)?.report)
}

pub fn run_pipeline_with_manifest(config: &PipelineConfig, setting: Setting) -> Result<RunOutcome> {
    config.validate().stage("config")?;
    let mut store = Store {
        root: config.cache_dir(),
        manifest: RunManifest {
            setting: Some(setting),
            ..Default::default()
        },
    };
    let input_hash = |name: &str, path: &Path, m: &mut RunManifest| -> Result<String> {
        let h = hash_path(path).stage("inputs")?;
        m.inputs.insert(name.to_string(), h.clone());
        Ok(h)
    };
    let corpus_hash = input_hash("corpus", &config.corpus_path, &mut store.manifest)?;
    let registry_hash = input_hash("registry", &config.registry_path, &mut store.manifest)?;
    let encoder_hash = input_hash("encoder", &config.encoder_path, &mut store.manifest)?;
    let train_hash = input_hash("sts_train", &config.sts_train_path, &mut store.manifest)?;
    let eval_hash = input_hash("sts_eval", &config.sts_eval_path, &mut store.manifest)?;
    let finetune_hash = match (&config.sts_finetune_path, setting) {
        (Some(p), _) => Some(input_hash("sts_finetune", p, &mut store.manifest)?),
        (None, Setting::Finetune) => {
            return Err(Error::InvalidArgument("fine-tune setting needs sts_finetune_path".into()).in_stage("config"))
        }
        (None, Setting::Pretrain) => None,
    };

    let registry = MweRegistry::load(&config.registry_path).stage("inputs")?;
    if registry.language() != config.language {
        return Err(Error::InvalidArgument(format!(
            "registry language {} differs from configured {}",
            registry.language(),
            config.language
        ))
        .in_stage("inputs"));
    }
    let encoder = Encoder::load(&config.encoder_path).stage("inputs")?;

    // mine + sample (+ curation)
    let mut sampled = Vec::with_capacity(registry.len());
    for (i, entry) in registry.entries().iter().enumerate() {
        let name = &entry.token_name;
        let forms: Vec<&str> = entry.forms().collect();
        let params = serde_json::json!({
            "corpus": corpus_hash, "token_name": name, "forms": forms, "max_matches": config.max_matches,
        });
        let (mined_dir, mined_hash) = store
            .cached("mine", &format!("mine/{name}"), &params, |dir| {
                extract_contexts(&config.corpus_path, entry, config.max_matches)?.save(&dir.join(CONTEXTS_FILE))
            })
            .stage("mine")?;

        let curation = config
            .curation_dir
            .as_ref()
            .map(|d| d.join(format!("{name}.jsonl")))
            .filter(|p| p.exists());
        let curation_hash = match &curation {
            Some(p) => Some(hash_path(p).stage("curate")?),
            None => None,
        };
        let seed = config.seed.wrapping_add(i as u64);
        let params = serde_json::json!({
            "mined": mined_hash, "k": config.contexts_per_idiom, "seed": seed, "curation": curation_hash,
        });
        let label = format!("sample/{name}");
        let stage = if curation.is_some() { "curate" } else { "sample" };
        let (dir, hash) = store
            .cached("sample", &label, &params, |dir| {
                let mined = ContextSet::load(&mined_dir.join(CONTEXTS_FILE))?;
                let usable = retain_matchable(&mined, entry);
                let picked = match &curation {
                    Some(p) => gold_sample(&apply_curation(&usable, p)?, config.contexts_per_idiom, seed)?,
                    None => sample_contexts(&usable, config.contexts_per_idiom, seed)?,
                };
                picked.save(&dir.join(CONTEXTS_FILE))
            })
            .stage(stage)?;
        sampled.push(Sampled {
            entry: entry.clone(),
            dir,
            hash,
            curated: curation.is_some(),
        });
    }

    // mimicking model
    let (model, model_hash) = match &config.mimic_model_path {
        Some(p) => {
            let h = input_hash("mimic_model", p, &mut store.manifest)?;
            (MimicModel::load(p).stage("mimic-train")?, h)
        }
        None => {
            let params = serde_json::json!({
                "encoder": encoder_hash, "corpus": corpus_hash, "settings": config.mimic,
                "schedule": config.mimic_schedule, "max_matches": config.max_matches, "seed": config.seed,
            });
            let (dir, hash) = store
                .cached("mimic-train", "mimic-train", &params, |dir| {
                    train_mimic_model(config, &encoder)?.save(&dir.join(MODEL_FILE))
                })
                .stage("mimic-train")?;
            (MimicModel::load(&dir.join(MODEL_FILE)).stage("mimic-train")?, hash)
        }
    };

    // inference
    let params = serde_json::json!({
        "encoder": encoder_hash, "model": model_hash, "registry": registry_hash,
        "contexts": sampled.iter().map(|s| &s.hash).collect::<Vec<_>>(),
    });
    let (bundle_dir, bundle_hash) = store
        .cached("embed", "embed", &params, |dir| {
            infer_bundle(&sampled, &model, &encoder, config.parallel_inference)?.save(&dir.join(BUNDLE_DIR))
        })
        .stage("embed")?;

    // injection
    let params = serde_json::json!({"encoder": encoder_hash, "bundle": bundle_hash, "registry": registry_hash});
    let (injected_dir, injected_hash) = store
        .cached("inject", "inject", &params, |dir| {
            let bundle = EmbeddingBundle::load(&bundle_dir.join(BUNDLE_DIR))?;
            let mut enc = encoder.clone();
            let mut reg = registry.clone();
            let report = inject_embeddings(&mut enc, &bundle, &mut reg)?;
            fs::write(dir.join("injection.json"), serde_json::to_string_pretty(&report)?)
                .map_err(|e| Error::io(dir, e))?;
            enc.save(&dir.join(ENCODER_FILE))
        })
        .stage("inject")?;

    // STS training
    let scale = config.score_scale;
    let train_pairs = load_sts_tsv(&config.sts_train_path, scale).stage("train")?;
    let pretrain_cfg = config.sts_config(config.pretrain_epochs(), Regime::Pretrain);
    let params = serde_json::json!({"encoder": injected_hash, "pairs": train_hash, "config": pretrain_cfg});
    let (mut trained_dir, mut trained_hash) = store
        .cached("train", "train/pretrain", &params, |dir| {
            train_checkpoint(&injected_dir.join(ENCODER_FILE), &registry, &train_pairs, &pretrain_cfg, dir)
        })
        .stage("train")?;

    if setting == Setting::Finetune {
        let path = config.sts_finetune_path.as_ref().expect("checked above");
        let pairs = load_sts_tsv(path, scale).stage("train")?;
        let cfg = config.sts_config(config.finetune_epochs, Regime::Finetune);
        let params = serde_json::json!({"encoder": trained_hash, "pairs": finetune_hash, "config": cfg});
        let from = trained_dir.join(ENCODER_FILE);
        (trained_dir, trained_hash) = store
            .cached("train", "train/finetune", &params, |dir| {
                train_checkpoint(&from, &registry, &pairs, &cfg, dir)
            })
            .stage("train")?;
    }

    // evaluation
    let eval_pairs = load_sts_tsv(&config.sts_eval_path, scale).stage("evaluate")?;
    let params = serde_json::json!({
        "encoder": trained_hash, "pairs": eval_hash, "registry": registry_hash,
        "min_occurrences": config.min_idiom_occurrences,
    });
    let (report_dir, _) = store
        .cached("evaluate", "evaluate", &params, |dir| {
            let enc = Encoder::load(&trained_dir.join(ENCODER_FILE))?;
            let reg = injected_view(&registry, &enc.tokenizer)?;
            let report = evaluate_checkpoint(&enc, &reg, &eval_pairs, config.min_idiom_occurrences)?;
            fs::write(dir.join(REPORT_FILE), report.to_json()).map_err(|e| Error::io(dir, e))
        })
        .stage("evaluate")?;
    let report_text = fs::read_to_string(report_dir.join(REPORT_FILE))
        .map_err(|e| Error::io(&report_dir, e))
        .stage("evaluate")?;
    let report: EvalReport = serde_json::from_str::<EvalReport>(&report_text).map_err(Error::from).stage("evaluate")?;

    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e)).stage("report")?;
    fs::write(out.join(REPORT_FILE), &report_text)
        .map_err(|e| Error::io(out, e))
        .stage("report")?;
    fs::write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(&store.manifest)? + "\n")
        .map_err(|e| Error::io(out, e))
        .stage("report")?;
    Ok(RunOutcome {
        report,
        manifest: store.manifest,
    })
}

/// Predictions, split correlations and the per-idiom breakdown.
pub fn evaluate_checkpoint(
    encoder: &Encoder,
    registry: &MweRegistry,
    pairs: &[StsPair],
    min_occurrences: usize,
) -> Result<EvalReport> {
    let predictions = predict_scores(encoder, registry, pairs)?;
    let mut report = evaluate(&predictions, pairs)?;
    let groups = idiom_of_pairs(pairs, registry);
    let grouped: Vec<usize> = groups.keys().copied().collect();
    // idiom pairs that mention no registered expression cannot be grouped
    let (p, g): (Vec<f64>, Vec<StsPair>) = grouped.iter().map(|&i| (predictions[i], pairs[i].clone())).unzip();
    let renumbered = groups.values().cloned().enumerate().collect();
    report.per_idiom = per_idiom_analysis(&p, &g, &renumbered, min_occurrences)?;
    Ok(report)
}

fn train_checkpoint(from: &Path, registry: &MweRegistry, pairs: &[StsPair], cfg: &TrainConfig, dir: &Path) -> Result<()> {
    let mut enc = Encoder::load(from)?;
    let reg = injected_view(registry, &enc.tokenizer)?;
    let history = train_sts(&mut enc, &reg, pairs, cfg)?;
    fs::write(dir.join(HISTORY_FILE), serde_json::to_string_pretty(&history)?).map_err(|e| Error::io(dir, e))?;
    enc.save(&dir.join(ENCODER_FILE))
}

/// Trains a mimicking model on frequent corpus words against `encoder`.
pub fn train_mimic_model(config: &PipelineConfig, encoder: &Encoder) -> Result<MimicModel> {
    let s = &config.mimic;
    let lines = read_lines_lossy(&config.corpus_path)?;
    let mut words = select_gold_words(
        lines.iter().map(String::as_str),
        &encoder.tokenizer,
        s.gold_min_frequency,
        s.gold_skip_top,
    );
    if let Some(max) = s.max_gold_words {
        words.truncate(max);
    }
    if words.is_empty() {
        return Err(Error::InvalidArgument("no gold words meet the frequency thresholds".into()));
    }
    let opts = ExtractOptions {
        max_matches: config.max_matches,
        ..Default::default()
    };
    let mut examples = Vec::with_capacity(words.len());
    for (i, w) in words.iter().enumerate() {
        let mined = extract_pattern(&config.corpus_path, w, &[w.as_str()], &opts)?;
        let picked = sample_contexts(&mined, s.contexts_per_word, config.seed.wrapping_add(i as u64))?;
        match MimicExample::new(w, &picked, encoder) {
            Ok(ex) => examples.push(ex),
            Err(e) => log::warn!("skipping gold word {w:?}: {e}"),
        }
    }
    let refs: Vec<&str> = words.iter().map(String::as_str).collect();
    let model = MimicModel::new(encoder, &refs, s.d_form.unwrap_or(encoder.d_model()), config.seed)?;
    let cfg = MimicTrainConfig {
        schedule: config.mimic_schedule,
        optimizer: AdamConfig::with_lr(s.learning_rate),
        batch_size: s.batch_size,
        seed: config.seed,
    };
    Ok(mimic_train(&model, encoder, &examples, &cfg)?.0)
}

fn infer_one(s: &Sampled, model: &MimicModel, encoder: &Encoder) -> Result<Option<TrainedEmbedding>> {
    let set = ContextSet::load(&s.dir.join(CONTEXTS_FILE))?;
    if set.is_empty() {
        log::warn!("no usable contexts for {}; leaving it out of the bundle", s.entry.token_name);
        return Ok(None);
    }
    let from = if s.curated { CreatedFrom::Gold } else { CreatedFrom::Auto };
    infer_embedding(&s.entry, &set, model, encoder, from).map(Some)
}

fn infer_bundle(sampled: &[Sampled], model: &MimicModel, encoder: &Encoder, parallel: bool) -> Result<EmbeddingBundle> {
    let results: Vec<Result<Option<TrainedEmbedding>>> = if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = sampled
                .iter()
                .map(|s| scope.spawn(move || infer_one(s, model, encoder)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("inference worker panicked"))
                .collect()
        })
    } else {
        sampled.iter().map(|s| infer_one(s, model, encoder)).collect()
    };
    let mut entries = Vec::new();
    for r in results {
        entries.extend(r?);
    }
    EmbeddingBundle::new(model.fingerprint(), encoder.d_model(), entries)
}

fn write_series(path: &Path, axis: &str, points: &BTreeMap<usize, EvalReport>) -> Result<()> {
    let mut out = format!("{axis}\tsr_all\tsr_idiom\tsr_sts\n");
    for (x, r) in points {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_else(|| "NA".into());
        out.push_str(&format!("{x}\t{:.6}\t{}\t{}\n", r.sr_all, opt(r.sr_idiom), opt(r.sr_sts)));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn write_table(path: &Path, label: &str, points: &BTreeMap<usize, EvalReport>) -> Result<()> {
    let mut out = format!("{}\n", EvalReport::TABLE_HEADER);
    for (x, r) in points {
        out.push_str(&r.table_row(&format!("{label}={x}")));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn point_config(config: &PipelineConfig, name: String) -> PipelineConfig {
    let mut c = config.clone();
    c.cache_dir = Some(config.cache_dir());
    c.output_dir = config.output_dir.join(name);
    c
}

/// Pre-train-setting runs that differ only in the number of contexts per
/// idiom. Mining is shared through the cache. Writes `sweep_contexts.tsv`
/// and a table to the output directory.
pub fn sweep_contexts(config: &PipelineConfig, ks: &[usize]) -> Result<BTreeMap<usize, EvalReport>> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidArgument("context counts must be nonempty and at least 1".into()));
    }
    let mut out = BTreeMap::new();
    for &k in ks {
        let mut c = point_config(config, format!("contexts_{k}"));
        c.contexts_per_idiom = k;
        c.max_matches = c.max_matches.max(k);
        let report = run_pipeline(&c, Setting::Pretrain).map_err(|e| e.in_stage(format!("sweep-contexts k={k}")))?;
        out.insert(k, report);
    }
    fs::create_dir_all(&config.output_dir).map_err(|e| Error::io(&config.output_dir, e))?;
    write_series(&config.output_dir.join("sweep_contexts.tsv"), "contexts", &out)?;
    write_table(&config.output_dir.join("sweep_contexts.txt"), "contexts", &out)?;
    Ok(out)
}

/// Runs that differ only in the training epochs of `setting`. Earlier stages
/// are shared through the cache. Writes `sweep_epochs_<setting>.tsv` and a
/// table to the output directory.
pub fn sweep_epochs(config: &PipelineConfig, setting: Setting, grid: &[usize]) -> Result<BTreeMap<usize, EvalReport>> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("epoch grid is empty".into()));
    }
    let mut out = BTreeMap::new();
    for &epochs in grid {
        let mut c = point_config(config, format!("{setting}_epochs_{epochs}"));
        match setting {
            Setting::Pretrain => c.pretrain_epochs = Some(epochs),
            Setting::Finetune => c.finetune_epochs = epochs,
        }
        let report = run_pipeline(&c, setting).map_err(|e| e.in_stage(format!("sweep-epochs epochs={epochs}")))?;
        out.insert(epochs, report);
    }
    fs::create_dir_all(&config.output_dir).map_err(|e| Error::io(&config.output_dir, e))?;
    write_series(&config.output_dir.join(format!("sweep_epochs_{setting}.tsv")), "epochs", &out)?;
    write_table(&config.output_dir.join(format!("sweep_epochs_{setting}.txt")), "epochs", &out)?;
    Ok(out)
}
