//! Siamese sentence similarity: mean-pooled encoder outputs compared by
//! cosine, trained with squared error against gold scores in `[0, 1]`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{BoundEncoder, Encoder};
use crate::error::{Error, Result};
use crate::nn::{self, Adam, AdamConfig, Matrix, Tape, Var};
use crate::registry::{Language, MweRegistry, TokenId};
use crate::tokenizer::{token_ids, tokenize_with_mwes};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    General,
    Idiom,
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Subset::General => "general",
            Subset::Idiom => "idiom",
        })
    }
}

impl FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "general" | "sts" => Ok(Subset::General),
            "idiom" => Ok(Subset::Idiom),
            other => Err(Error::Format(format!("unknown subset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StsPair {
    pub sentence_a: String,
    pub sentence_b: String,
    pub gold_score: f64,
    pub language: Language,
    pub subset: Subset,
}

impl StsPair {
    pub fn new(a: &str, b: &str, gold: f64, language: Language, subset: Subset) -> Result<Self> {
        if a.trim().is_empty() || b.trim().is_empty() {
            return Err(Error::InvalidArgument("STS sentences must be non-empty".into()));
        }
        if !(0.0..=1.0).contains(&gold) {
            return Err(Error::InvalidArgument(format!("gold score {gold} outside [0, 1]")));
        }
        Ok(Self {
            sentence_a: a.to_string(),
            sentence_b: b.to_string(),
            gold_score: gold,
            language,
            subset,
        })
    }
}

/// Source scale of gold scores in a TSV file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreScale {
    Unit,
    Five,
    /// `Unit` when every score is at most 1, else `Five`.
    #[default]
    Auto,
}

pub const STS_HEADER: &str = "sentence_a\tsentence_b\tgold_score\tlanguage\tsubset";

/// Reads the five-column TSV format (header row required), normalizing
/// scores to `[0, 1]`.
pub fn load_sts_tsv(path: &Path, scale: ScoreScale) -> Result<Vec<StsPair>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = content.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == STS_HEADER => {}
        _ => return Err(parse_err(1, format!("expected header {STS_HEADER:?}"))),
    }
    let mut raw = Vec::new();
    for (i, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(parse_err(i + 1, format!("expected 5 columns, found {}", cols.len())));
        }
        let score: f64 = cols[2]
            .trim()
            .parse()
            .map_err(|e| parse_err(i + 1, format!("bad score {:?}: {e}", cols[2])))?;
        let language: Language = cols[3].parse().map_err(|e: Error| parse_err(i + 1, e.to_string()))?;
        let subset: Subset = cols[4].parse().map_err(|e: Error| parse_err(i + 1, e.to_string()))?;
        raw.push((i + 1, cols[0].to_string(), cols[1].to_string(), score, language, subset));
    }
    let max = raw.iter().map(|r| r.3).fold(0.0, f64::max);
    let divisor = match scale {
        ScoreScale::Unit => 1.0,
        ScoreScale::Five => 5.0,
        ScoreScale::Auto if max <= 1.0 => 1.0,
        ScoreScale::Auto => 5.0,
    };
    raw.into_iter()
        .map(|(line, a, b, score, language, subset)| {
            StsPair::new(&a, &b, score / divisor, language, subset).map_err(|e| parse_err(line, e.to_string()))
        })
        .collect()
}

pub fn write_sts_tsv(path: &Path, pairs: &[StsPair]) -> Result<()> {
    let mut out = String::from(STS_HEADER);
    out.push('\n');
    for p in pairs {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            p.sentence_a, p.sentence_b, p.gold_score, p.language, p.subset
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub regime: Regime,
}

impl TrainConfig {
    /// 35 epochs for English, 45 for Portuguese; Galician trains on the
    /// Portuguese data and uses its setting.
    pub fn pretrain(language: Language) -> Self {
        Self {
            epochs: match language {
                Language::En => 35,
                Language::Pt | Language::Gl => 45,
            },
            learning_rate: 2e-5,
            batch_size: 16,
            seed: 0,
            regime: Regime::Pretrain,
        }
    }

    pub fn finetune() -> Self {
        Self {
            epochs: 1,
            learning_rate: 2e-5,
            batch_size: 16,
            seed: 0,
            regime: Regime::Finetune,
        }
    }
}

/// Token ids for a sentence, truncated to the encoder's maximum length.
pub fn sentence_ids(encoder: &Encoder, sentence: &str, registry: &MweRegistry) -> Result<Vec<TokenId>> {
    if sentence.trim().is_empty() {
        return Err(Error::InvalidArgument("empty sentence".into()));
    }
    let mut ids = token_ids(&tokenize_with_mwes(sentence, registry, &encoder.tokenizer))?;
    if ids.is_empty() {
        return Err(Error::InvalidArgument(format!("{sentence:?} has no tokens")));
    }
    ids.truncate(encoder.config.max_len);
    Ok(ids)
}

fn pooled_var(tape: &mut Tape<'_>, encoder: &Encoder, bound: &BoundEncoder, ids: &[TokenId]) -> Var {
    let x = encoder.embed_ids(tape, bound, ids);
    let h = encoder.forward(tape, bound, x);
    tape.mean_rows(h)
}

pub fn encode_ids(encoder: &Encoder, ids: &[TokenId]) -> Vec<f64> {
    let mut tape = Tape::new();
    let bound = encoder.bind(&mut tape, false);
    let v = pooled_var(&mut tape, encoder, &bound, ids);
    tape.value(v).data().to_vec()
}

/// Mean of the final-layer token outputs.
pub fn encode_sentence(encoder: &Encoder, sentence: &str, registry: &MweRegistry) -> Result<Vec<f64>> {
    Ok(encode_ids(encoder, &sentence_ids(encoder, sentence, registry)?))
}

pub fn similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (na, nb) = (nn::norm(a), nn::norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateVector);
    }
    Ok((nn::dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn predict_scores(encoder: &Encoder, registry: &MweRegistry, pairs: &[StsPair]) -> Result<Vec<f64>> {
    pairs
        .iter()
        .map(|p| {
            let a = encode_sentence(encoder, &p.sentence_a, registry)?;
            let b = encode_sentence(encoder, &p.sentence_b, registry)?;
            similarity(&a, &b)
        })
        .collect()
}

struct EncodedPair {
    a: Vec<TokenId>,
    b: Vec<TokenId>,
    gold: f64,
}

fn encode_pairs(encoder: &Encoder, registry: &MweRegistry, pairs: &[StsPair]) -> Result<Vec<EncodedPair>> {
    pairs
        .iter()
        .map(|p| {
            Ok(EncodedPair {
                a: sentence_ids(encoder, &p.sentence_a, registry)?,
                b: sentence_ids(encoder, &p.sentence_b, registry)?,
                gold: p.gold_score,
            })
        })
        .collect()
}

/// Mean `(cos - gold)²` over `batch`, with gradients for every encoder
/// tensor (in [`Encoder::tensors`] order) when requested.
fn batch_loss(encoder: &Encoder, batch: &[&EncodedPair], with_grads: bool) -> (f64, Option<Vec<Option<Matrix>>>) {
    let mut tape = Tape::new();
    let bound = encoder.bind(&mut tape, with_grads);
    let losses: Vec<Var> = batch
        .iter()
        .map(|p| {
            let a = pooled_var(&mut tape, encoder, &bound, &p.a);
            let b = pooled_var(&mut tape, encoder, &bound, &p.b);
            let c = tape.cosine(a, b);
            tape.squared_diff(c, p.gold)
        })
        .collect();
    let sum = tape.sum(&losses);
    let loss = tape.scale(sum, 1.0 / losses.len() as f64);
    let value = tape.scalar(loss);
    let grads = with_grads.then(|| {
        let g = tape.backward(loss);
        bound.vars().iter().map(|&v| g.get(v).cloned()).collect()
    });
    (value, grads)
}

/// Mean cosine-MSE loss over `pairs`.
pub fn sts_loss(encoder: &Encoder, registry: &MweRegistry, pairs: &[StsPair]) -> Result<f64> {
    let encoded = encode_pairs(encoder, registry, pairs)?;
    let refs: Vec<&EncodedPair> = encoded.iter().collect();
    Ok(batch_loss(encoder, &refs, false).0)
}

/// Gradients of [`sts_loss`] for every encoder tensor.
pub fn sts_gradients(encoder: &Encoder, registry: &MweRegistry, pairs: &[StsPair]) -> Result<Vec<Option<Matrix>>> {
    let encoded = encode_pairs(encoder, registry, pairs)?;
    let refs: Vec<&EncodedPair> = encoded.iter().collect();
    Ok(batch_loss(encoder, &refs, true).1.expect("gradients requested"))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub initial_loss: Option<f64>,
    pub epoch_losses: Vec<f64>,
}

/// Trains every encoder tensor, injected rows included. Batches are drawn
/// from a seeded shuffle each epoch.
pub fn train_sts(encoder: &mut Encoder, registry: &MweRegistry, pairs: &[StsPair], config: &TrainConfig) -> Result<TrainHistory> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no STS pairs to train on".into()));
    }
    if config.regime == Regime::Pretrain {
        let idioms = pairs.iter().filter(|p| p.subset == Subset::Idiom).count();
        if idioms > 0 {
            return Err(Error::SettingViolation(idioms));
        }
    }
    let mut history = TrainHistory::default();
    if config.epochs == 0 {
        return Ok(history);
    }
    let encoded = encode_pairs(encoder, registry, pairs)?;
    let all: Vec<&EncodedPair> = encoded.iter().collect();
    history.initial_loss = Some(batch_loss(encoder, &all, false).0);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(AdamConfig::with_lr(config.learning_rate));
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let batch: Vec<&EncodedPair> = chunk.iter().map(|&i| &encoded[i]).collect();
            let (loss, grads) = batch_loss(encoder, &batch, true);
            total += loss * batch.len() as f64;
            adam.step(encoder.tensors_mut(), &grads.expect("gradients requested"));
        }
        let mean = total / encoded.len() as f64;
        log::debug!("sts epoch {epoch}: loss {mean:.5}");
        history.epoch_losses.push(mean);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::tokenizer::WordPiece;

    fn toy() -> Encoder {
        let tok = WordPiece::from_pieces(["a", "b", "c", "d", "e", "his", "swan", "song"]);
        let config = EncoderConfig {
            d_model: 8,
            n_layers: 2,
            d_ff: 16,
            max_len: 16,
            init_std: 0.3,
        };
        Encoder::new(config, tok, 7)
    }

    #[test]
    fn cosine_examples() {
        let x = [0.3, -1.2, 2.0];
        assert!((similarity(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        // scalar-loop recomputation
        let (a, b) = ([1.0, 2.0, 3.0], [4.0, 5.0, 6.0]);
        let mut dot = 0.0;
        let mut na: f64 = 0.0;
        let mut nb: f64 = 0.0;
        for i in 0..3 {
            dot += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
        let expected = dot / na.sqrt() / nb.sqrt();
        let got = similarity(&a, &b).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.974_631_846_197_076_2).abs() < 1e-12);
        assert!(matches!(similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::DegenerateVector)));
    }

    #[test]
    fn pooling_is_mean_of_outputs() {
        let enc = toy();
        let reg = MweRegistry::new(Language::En);
        let v = encode_sentence(&enc, "a b c", &reg).unwrap();
        let out = enc.encode_ids(&enc.tokenizer.encode("a b c"));
        for c in 0..8 {
            let mean = (out.get(0, c) + out.get(1, c) + out.get(2, c)) / 3.0;
            assert!((v[c] - mean).abs() < 1e-12);
        }
        let single = encode_sentence(&enc, "d", &reg).unwrap();
        assert_eq!(single, enc.encode_ids(&[enc.tokenizer.id("d").unwrap()]).into_vec());
        assert_eq!(v, encode_sentence(&enc, "a b c", &reg).unwrap());
        assert!(encode_sentence(&enc, "  ", &reg).is_err());
    }

    #[test]
    fn identical_sentences_score_one() {
        let enc = toy();
        let reg = MweRegistry::new(Language::En);
        let p = StsPair::new("a b c", "a b c", 1.0, Language::En, Subset::General).unwrap();
        let q = StsPair::new("a d", "e", 0.2, Language::En, Subset::General).unwrap();
        let s = predict_scores(&enc, &reg, &[p.clone(), q.clone()]).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-6);
        let swapped = predict_scores(&enc, &reg, &[q, p]).unwrap();
        assert_eq!(swapped, vec![s[1], s[0]]);
    }

    #[test]
    fn pretrain_rejects_idiom_pairs() {
        let mut enc = toy();
        let reg = MweRegistry::new(Language::En);
        let pairs = vec![StsPair::new("a", "b", 0.5, Language::En, Subset::Idiom).unwrap()];
        let cfg = TrainConfig::pretrain(Language::En);
        assert!(matches!(
            train_sts(&mut enc, &reg, &pairs, &cfg),
            Err(Error::SettingViolation(1))
        ));
    }

    #[test]
    fn zero_epochs_leave_weights_untouched() {
        let mut enc = toy();
        let before = enc.clone();
        let reg = MweRegistry::new(Language::En);
        let pairs = vec![StsPair::new("a b", "c", 0.5, Language::En, Subset::General).unwrap()];
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::pretrain(Language::En)
        };
        train_sts(&mut enc, &reg, &pairs, &cfg).unwrap();
        assert_eq!(enc, before);
    }

    #[test]
    fn tsv_roundtrip_and_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sts.tsv");
        fs::write(&path, format!("{STS_HEADER}\nA man.\tA person.\t4.5\ten\tgeneral\nx\ty\t0\tpt\tidiom\n")).unwrap();
        let pairs = load_sts_tsv(&path, ScoreScale::Auto).unwrap();
        assert_eq!(pairs[0].gold_score, 0.9);
        assert_eq!(pairs[1].language, Language::Pt);
        assert_eq!(pairs[1].subset, Subset::Idiom);
        write_sts_tsv(&path, &pairs).unwrap();
        assert_eq!(load_sts_tsv(&path, ScoreScale::Unit).unwrap(), pairs);

        fs::write(&path, "a\tb\n").unwrap();
        assert!(matches!(load_sts_tsv(&path, ScoreScale::Auto), Err(Error::Parse { line: 1, .. })));
        fs::write(&path, format!("{STS_HEADER}\nA\tB\tx\ten\tgeneral\n")).unwrap();
        assert!(matches!(load_sts_tsv(&path, ScoreScale::Auto), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn default_epochs() {
        assert_eq!(TrainConfig::pretrain(Language::En).epochs, 35);
        assert_eq!(TrainConfig::pretrain(Language::Pt).epochs, 45);
        assert_eq!(TrainConfig::pretrain(Language::Gl).epochs, 45);
        assert_eq!(TrainConfig::finetune().epochs, 1);
    }
}
