//! Synthetic desk-scale harness.
//!
//! Topics sit on a ring. Each topic owns a few nouns and a set of context
//! words, and corpus lines are built from a topic's words around a noun.
//! Every idiom is two nouns borrowed from other topics. Most of its corpus
//! lines come from the topic of its meaning noun and the rest are literal
//! uses in the topic of a constituent. General gold similarity falls off
//! linearly with ring distance; idiom pairs are scored as paraphrase or not.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::mimic::StageSchedule;
use crate::mlm::{pretrain_mlm, MlmConfig};
use crate::pipeline::{MimicSettings, PipelineConfig};
use crate::registry::{Language, MweRegistry};
use crate::sts::{write_sts_tsv, StsPair, Subset};
use crate::tokenizer::{WordPiece, SPECIALS};

const FUNCTION_WORDS: [&str; 12] = ["the", "a", "was", "is", "here", "there", "i", "saw", "and", "near", "with", "very"];
const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub topics: usize,
    pub nouns_per_topic: usize,
    pub context_words_per_topic: usize,
    pub sentences: usize,
    pub idioms: usize,
    pub idiom_occurrences: usize,
    /// Share of an idiom's corpus lines that use it literally.
    pub literal_rate: f64,
    pub general_train_pairs: usize,
    pub general_eval_pairs: usize,
    pub idiom_train_pairs_per_idiom: usize,
    pub idiom_eval_pairs_per_idiom: usize,
    pub encoder: EncoderConfig,
    pub mlm: MlmConfig,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            topics: 10,
            nouns_per_topic: 3,
            context_words_per_topic: 6,
            sentences: 2000,
            idioms: 10,
            idiom_occurrences: 40,
            literal_rate: 0.3,
            general_train_pairs: 800,
            general_eval_pairs: 150,
            idiom_train_pairs_per_idiom: 10,
            idiom_eval_pairs_per_idiom: 6,
            encoder: EncoderConfig {
                d_model: 32,
                n_layers: 2,
                d_ff: 64,
                max_len: 16,
                init_std: 0.1,
            },
            mlm: MlmConfig {
                epochs: 30,
                ..MlmConfig::default()
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthIdiom {
    pub surface: String,
    pub token_name: String,
    pub meaning: String,
    pub topic: usize,
    pub literal_topic: usize,
}

#[derive(Debug, Clone)]
pub struct SynthHarness {
    pub config: SynthConfig,
    pub nouns: Vec<Vec<String>>,
    pub context_words: Vec<Vec<String>>,
    pub idioms: Vec<SynthIdiom>,
    pub corpus: Vec<String>,
    pub registry: MweRegistry,
    pub tokenizer: WordPiece,
    pub general_train: Vec<StsPair>,
    pub idiom_train: Vec<StsPair>,
    pub eval: Vec<StsPair>,
}

/// Pipeline settings scaled to the harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRun {
    pub contexts_per_idiom: usize,
    pub mimic: MimicSettings,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub sts_learning_rate: f64,
    pub sts_batch_size: usize,
}

impl Default for ToyRun {
    fn default() -> Self {
        Self {
            contexts_per_idiom: 15,
            mimic: MimicSettings {
                learning_rate: 3e-3,
                batch_size: 1,
                d_form: None,
                gold_min_frequency: 20,
                gold_skip_top: FUNCTION_WORDS.len() + 1,
                max_gold_words: None,
                contexts_per_word: 10,
            },
            pretrain_epochs: 10,
            finetune_epochs: 1,
            sts_learning_rate: 1e-3,
            sts_batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPaths {
    pub corpus: PathBuf,
    pub registry: PathBuf,
    pub general_train: PathBuf,
    pub idiom_train: PathBuf,
    pub eval: PathBuf,
    pub encoder: Option<PathBuf>,
}

fn pseudo_word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    (0..syllables)
        .flat_map(|_| {
            [
                *CONSONANTS.choose(rng).expect("nonempty") as char,
                *VOWELS.choose(rng).expect("nonempty") as char,
            ]
        })
        .collect()
}

fn fresh_words(rng: &mut ChaCha8Rng, used: &mut BTreeSet<String>, n: usize, syllables: usize) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = pseudo_word(rng, syllables);
        if used.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn ring_distance(a: usize, b: usize, n: usize) -> usize {
    let d = a.abs_diff(b);
    d.min(n - d)
}

impl SynthHarness {
    pub fn generate(config: SynthConfig) -> Result<Self> {
        let t = config.topics;
        if t < 4 || config.idioms > t || config.nouns_per_topic < 2 || config.context_words_per_topic < 3 {
            return Err(Error::InvalidArgument("synthetic harness too small".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut used: BTreeSet<String> = FUNCTION_WORDS.iter().map(|w| w.to_string()).collect();
        let nouns: Vec<Vec<String>> = (0..t)
            .map(|_| fresh_words(&mut rng, &mut used, config.nouns_per_topic, 3))
            .collect();
        let context_words: Vec<Vec<String>> = (0..t)
            .map(|_| fresh_words(&mut rng, &mut used, config.context_words_per_topic, 2))
            .collect();

        let mut registry = MweRegistry::new(Language::En);
        let mut idioms = Vec::with_capacity(config.idioms);
        for k in 0..config.idioms {
            let (a, b) = ((k + 3) % t, (k + t / 2 + 1) % t);
            let surface = format!("{} {}", nouns[a][1], nouns[b][config.nouns_per_topic - 1]);
            let entry = registry.register(&surface, Language::En, &[])?;
            idioms.push(SynthIdiom {
                surface,
                token_name: entry.token_name,
                meaning: nouns[k][0].clone(),
                topic: k,
                literal_topic: a,
            });
        }

        let mut h = Self {
            config: config.clone(),
            nouns,
            context_words,
            idioms,
            corpus: Vec::new(),
            registry,
            tokenizer: WordPiece::from_pieces(std::iter::empty::<&str>()),
            general_train: Vec::new(),
            idiom_train: Vec::new(),
            eval: Vec::new(),
        };

        let mut corpus: Vec<String> = (0..config.sentences)
            .map(|_| {
                let topic = rng.random_range(0..t);
                let noun = h.nouns[topic].choose(&mut rng).expect("nonempty").clone();
                h.topic_sentence(topic, &noun, &mut rng)
            })
            .collect();
        for idiom in &h.idioms {
            for _ in 0..config.idiom_occurrences {
                let topic = if rng.random::<f64>() < config.literal_rate {
                    idiom.literal_topic
                } else {
                    idiom.topic
                };
                corpus.push(h.topic_sentence(topic, &idiom.surface, &mut rng));
            }
        }
        corpus.shuffle(&mut rng);
        h.corpus = corpus;

        let pieces = FUNCTION_WORDS
            .iter()
            .map(|w| w.to_string())
            .chain(h.nouns.iter().flatten().cloned())
            .chain(h.context_words.iter().flatten().cloned())
            .chain(std::iter::once(".".to_string()));
        h.tokenizer = WordPiece::new(SPECIALS.iter().map(|s| s.to_string()).chain(pieces).collect())?;

        h.general_train = h.general_pairs(config.general_train_pairs, &mut rng)?;
        let general_eval = h.general_pairs(config.general_eval_pairs, &mut rng)?;
        h.idiom_train = h.idiom_pairs(config.idiom_train_pairs_per_idiom, &mut rng)?;
        let idiom_eval = h.idiom_pairs(config.idiom_eval_pairs_per_idiom, &mut rng)?;
        h.eval = general_eval.into_iter().chain(idiom_eval).collect();
        Ok(h)
    }

    pub fn similarity(&self, a: usize, b: usize) -> f64 {
        let half = (self.config.topics / 2) as f64;
        1.0 - ring_distance(a, b, self.config.topics) as f64 / half
    }

    fn ctx(&self, topic: usize, rng: &mut ChaCha8Rng) -> &str {
        self.context_words[topic].choose(rng).expect("nonempty")
    }

    fn topic_sentence(&self, topic: usize, noun: &str, rng: &mut ChaCha8Rng) -> String {
        let (c1, c2, c3) = (self.ctx(topic, rng), self.ctx(topic, rng), self.ctx(topic, rng));
        match rng.random_range(0..4) {
            0 => format!("the {noun} {c1} {c2} near a {c3} ."),
            1 => format!("a {noun} was {c1} and {c2} ."),
            2 => format!("{c1} {c2} with the {noun} there ."),
            _ => format!("i saw {c1} {noun} very {c2} {c3} ."),
        }
    }

    fn neutral_frame(noun: &str, frame: usize) -> String {
        match frame % 3 {
            0 => format!("the {noun} is here ."),
            1 => format!("i saw a {noun} there ."),
            _ => format!("there was the {noun} ."),
        }
    }

    fn side(&self, topic: usize, rng: &mut ChaCha8Rng) -> String {
        let noun = self.nouns[topic].choose(rng).expect("nonempty");
        if rng.random::<bool>() {
            Self::neutral_frame(noun, rng.random_range(0..3))
        } else {
            self.topic_sentence(topic, noun, rng)
        }
    }

    /// Partner topic at a uniformly drawn ring distance.
    fn partner(&self, topic: usize, rng: &mut ChaCha8Rng) -> usize {
        let t = self.config.topics;
        let d = rng.random_range(0..=t / 2);
        if rng.random::<bool>() {
            (topic + d) % t
        } else {
            (topic + t - d) % t
        }
    }

    fn general_pairs(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<StsPair>> {
        (0..n)
            .map(|_| {
                let a = rng.random_range(0..self.config.topics);
                let b = self.partner(a, rng);
                let (sa, sb) = (self.side(a, rng), self.side(b, rng));
                StsPair::new(&sa, &sb, self.similarity(a, b), Language::En, Subset::General)
            })
            .collect()
    }

    /// Idiom sentence against the same frame holding a noun of some topic.
    /// Gold is 1 for a paraphrase (a noun of the meaning topic), else 0.
    fn idiom_pairs(&self, per_idiom: usize, rng: &mut ChaCha8Rng) -> Result<Vec<StsPair>> {
        let mut out = Vec::with_capacity(per_idiom * self.idioms.len());
        for idiom in &self.idioms {
            for i in 0..per_idiom {
                let u = if i == 0 { idiom.topic } else { self.partner(idiom.topic, rng) };
                let noun = if u == idiom.topic {
                    idiom.meaning.as_str()
                } else {
                    self.nouns[u].choose(rng).expect("nonempty")
                };
                let frame = rng.random_range(0..3);
                let gold = if u == idiom.topic { 1.0 } else { 0.0 };
                out.push(StsPair::new(
                    &Self::neutral_frame(&idiom.surface, frame),
                    &Self::neutral_frame(noun, frame),
                    gold,
                    Language::En,
                    Subset::Idiom,
                )?);
            }
        }
        Ok(out)
    }

    /// Fresh encoder trained by masked-token prediction on the corpus.
    pub fn pretrain_encoder(&self) -> (Encoder, Vec<f64>) {
        let mut enc = Encoder::new(self.config.encoder.clone(), self.tokenizer.clone(), self.config.seed);
        let ids: Vec<Vec<_>> = self.corpus.iter().map(|l| self.tokenizer.encode(l)).collect();
        let losses = pretrain_mlm(&mut enc, &ids, &self.config.mlm);
        (enc, losses)
    }

    /// Meaning word of each idiom keyed by token name.
    pub fn meaning_of(&self, token_name: &str) -> Option<&str> {
        self.idioms
            .iter()
            .find(|i| i.token_name == token_name)
            .map(|i| i.meaning.as_str())
    }

    pub fn write(&self, dir: &Path) -> Result<SynthPaths> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = SynthPaths {
            corpus: dir.join("corpus.txt"),
            registry: dir.join("registry.json"),
            general_train: dir.join("sts_general_train.tsv"),
            idiom_train: dir.join("sts_idiom_train.tsv"),
            eval: dir.join("sts_eval.tsv"),
            encoder: None,
        };
        let mut text = self.corpus.join("\n");
        text.push('\n');
        fs::write(&paths.corpus, text).map_err(|e| Error::io(&paths.corpus, e))?;
        self.registry.save(&paths.registry)?;
        write_sts_tsv(&paths.general_train, &self.general_train)?;
        write_sts_tsv(&paths.idiom_train, &self.idiom_train)?;
        write_sts_tsv(&paths.eval, &self.eval)?;
        Ok(paths)
    }

    /// Writes the inputs, pretrains and saves the base encoder, and returns
    /// a pipeline configuration over them with outputs under `dir/run`.
    pub fn prepare_run(&self, dir: &Path, toy: &ToyRun) -> Result<PipelineConfig> {
        let mut paths = self.write(dir)?;
        let (encoder, losses) = self.pretrain_encoder();
        log::info!("masked-token pretraining losses {losses:?}");
        let encoder_path = dir.join("encoder.json");
        encoder.save(&encoder_path)?;
        paths.encoder = Some(encoder_path.clone());
        let mut c = PipelineConfig::new(
            Language::En,
            paths.corpus,
            paths.registry,
            encoder_path,
            paths.general_train,
            paths.eval,
            dir.join("run"),
        );
        c.sts_finetune_path = Some(paths.idiom_train);
        c.contexts_per_idiom = toy.contexts_per_idiom;
        c.mimic_schedule = StageSchedule::default();
        c.mimic = toy.mimic.clone();
        c.pretrain_epochs = Some(toy.pretrain_epochs);
        c.finetune_epochs = toy.finetune_epochs;
        c.sts_learning_rate = toy.sts_learning_rate;
        c.sts_batch_size = toy.sts_batch_size;
        c.seed = self.config.seed;
        Ok(c)
    }
}
