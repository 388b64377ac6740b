//! Appends learned expression vectors to an encoder's vocabulary.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::mimic::EmbeddingBundle;
use crate::nn::Matrix;
use crate::registry::{MweRegistry, TokenId};
use crate::tokenizer::WordPiece;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionReport {
    pub old_vocab_size: usize,
    pub new_vocab_size: usize,
    pub assigned_ids: BTreeMap<String, TokenId>,
    pub checksum_before: String,
    pub checksum_after_existing_rows: String,
}

/// SHA-256 over the first `rows` rows of `m` (little-endian f64 bytes).
pub fn checksum_rows(m: &Matrix, rows: usize) -> String {
    let mut h = Sha256::new();
    for r in 0..rows {
        for v in m.row(r) {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Validates everything up front, then appends one embedding row (and one
/// zero output-bias entry for the tied LM head) per bundle entry in manifest
/// order, registers the token names with the tokenizer and records the new
/// ids in the registry.
pub fn inject_embeddings(encoder: &mut Encoder, bundle: &EmbeddingBundle, registry: &mut MweRegistry) -> Result<InjectionReport> {
    if bundle.dimension != encoder.d_model() {
        return Err(Error::DimMismatch {
            expected: encoder.d_model(),
            actual: bundle.dimension,
        });
    }
    let mut seen = HashSet::new();
    for e in &bundle.entries {
        if registry.get(&e.mwe_token_name).is_none() {
            return Err(Error::UnregisteredMwe(e.mwe_token_name.clone()));
        }
        if encoder.tokenizer.id(&e.mwe_token_name).is_some() || !seen.insert(e.mwe_token_name.as_str()) {
            return Err(Error::AlreadyInjected(e.mwe_token_name.clone()));
        }
    }

    let old_vocab_size = encoder.vocab_size();
    let checksum_before = checksum_rows(&encoder.weights.token_emb, old_vocab_size);
    let mut assigned_ids = BTreeMap::new();
    for e in &bundle.entries {
        let row: Vec<f64> = e.vector.iter().map(|&v| f64::from(v)).collect();
        encoder.weights.token_emb.push_row(&row);
        let id = encoder.tokenizer.add_token(&e.mwe_token_name)?;
        debug_assert_eq!(id as usize + 1, encoder.weights.token_emb.rows());
        registry.assign_token_id(&e.mwe_token_name, id)?;
        assigned_ids.insert(e.mwe_token_name.clone(), id);
    }
    let bias = &encoder.weights.mlm_out_bias;
    let mut extended = bias.data().to_vec();
    extended.resize(encoder.vocab_size(), 0.0);
    encoder.weights.mlm_out_bias = Matrix::row_vector(extended);

    Ok(InjectionReport {
        old_vocab_size,
        new_vocab_size: encoder.vocab_size(),
        assigned_ids,
        checksum_before,
        checksum_after_existing_rows: checksum_rows(&encoder.weights.token_emb, old_vocab_size),
    })
}

/// Restores registry token ids from a vocabulary that already contains the
/// injected token names (e.g. a reloaded checkpoint). Returns how many
/// entries received an id.
pub fn assign_ids_from_vocab(registry: &mut MweRegistry, tokenizer: &WordPiece) -> usize {
    let found: Vec<(String, TokenId)> = registry
        .entries()
        .iter()
        .filter_map(|e| tokenizer.id(&e.token_name).map(|id| (e.token_name.clone(), id)))
        .collect();
    for (name, id) in &found {
        registry
            .assign_token_id(name, *id)
            .expect("name comes from the registry");
    }
    found.len()
}

/// Copy of `registry` holding only the expressions present in `tokenizer`,
/// with their ids. Tokenizing with it leaves the remaining expressions as
/// ordinary word pieces.
pub fn injected_view(registry: &MweRegistry, tokenizer: &WordPiece) -> Result<MweRegistry> {
    let mut out = MweRegistry::new(registry.language());
    for e in registry.entries() {
        if let Some(id) = tokenizer.id(&e.token_name) {
            out.register(&e.surface, e.language, &e.variants)?;
            out.assign_token_id(&e.token_name, id)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::mimic::{CreatedFrom, TrainedEmbedding};
    use crate::registry::Language;
    use crate::tokenizer::{token_ids, tokenize_with_mwes};

    fn setup() -> (Encoder, MweRegistry, EmbeddingBundle) {
        let tok = WordPiece::from_pieces(["his", "swan", "song", "big", "fish", "story"]);
        let config = EncoderConfig {
            d_model: 4,
            n_layers: 1,
            d_ff: 8,
            max_len: 8,
            init_std: 0.2,
        };
        let enc = Encoder::new(config, tok, 3);
        let mut reg = MweRegistry::new(Language::En);
        reg.register("swan song", Language::En, &[]).unwrap();
        reg.register("fish story", Language::En, &[]).unwrap();
        let emb = |name: &str, v: f32| TrainedEmbedding {
            mwe_token_name: name.into(),
            vector: vec![v, -v, 0.5, 0.1],
            num_contexts: 5,
            model_fingerprint: "m".into(),
            created_from: CreatedFrom::Auto,
        };
        let bundle = EmbeddingBundle::new(
            "m".into(),
            4,
            vec![emb("idiom_fish_story", 0.3), emb("idiom_swan_song", 0.7)],
        )
        .unwrap();
        (enc, reg, bundle)
    }

    #[test]
    fn view_keeps_injected_entries_only() {
        let (mut enc, mut reg, bundle) = setup();
        let only_fish = EmbeddingBundle::new("m".into(), 4, bundle.entries[..1].to_vec()).unwrap();
        inject_embeddings(&mut enc, &only_fish, &mut reg).unwrap();
        let view = injected_view(&reg, &enc.tokenizer).unwrap();
        assert_eq!(view.len(), 1);
        let tokens = tokenize_with_mwes("his swan song big fish story", &view, &enc.tokenizer);
        assert_eq!(token_ids(&tokens).unwrap(), vec![5, 6, 7, 8, 11]);
        assert!(token_ids(&tokenize_with_mwes("his swan song", &reg, &enc.tokenizer)).is_err());
    }

    #[test]
    fn appends_in_manifest_order() {
        let (mut enc, mut reg, bundle) = setup();
        let before = enc.clone();
        let report = inject_embeddings(&mut enc, &bundle, &mut reg).unwrap();
        assert_eq!(report.old_vocab_size, 11);
        assert_eq!(report.new_vocab_size, 13);
        assert_eq!(report.assigned_ids["idiom_fish_story"], 11);
        assert_eq!(report.assigned_ids["idiom_swan_song"], 12);
        assert_eq!(report.checksum_before, report.checksum_after_existing_rows);
        assert_eq!(
            &enc.weights.token_emb.data()[..before.weights.token_emb.data().len()],
            before.weights.token_emb.data()
        );
        let row: Vec<f32> = enc.embedding_row(12).iter().map(|&v| v as f32).collect();
        assert_eq!(row, bundle.entries[1].vector);
        assert_eq!(enc.weights.mlm_out_bias.cols(), 13);
        assert_eq!(reg.get("idiom_swan_song").unwrap().token_id, Some(12));

        let toks = tokenize_with_mwes("his swan song", &reg, &enc.tokenizer);
        assert_eq!(token_ids(&toks).unwrap(), vec![enc.tokenizer.id("his").unwrap(), 12]);
    }

    #[test]
    fn rejects_bad_bundles_without_mutation() {
        let (mut enc, mut reg, bundle) = setup();
        inject_embeddings(&mut enc, &bundle, &mut reg).unwrap();
        let snapshot = enc.clone();
        assert!(matches!(
            inject_embeddings(&mut enc, &bundle, &mut reg),
            Err(Error::AlreadyInjected(_))
        ));
        assert_eq!(enc, snapshot);

        let (mut enc, mut reg, mut bundle) = setup();
        bundle.dimension = 5;
        assert!(matches!(
            inject_embeddings(&mut enc, &bundle, &mut reg),
            Err(Error::DimMismatch { .. })
        ));
        let (mut enc, _, bundle) = setup();
        let mut empty = MweRegistry::new(Language::En);
        assert!(matches!(
            inject_embeddings(&mut enc, &bundle, &mut empty),
            Err(Error::UnregisteredMwe(_))
        ));
    }

    #[test]
    fn ids_recovered_from_vocab() {
        let (mut enc, mut reg, bundle) = setup();
        inject_embeddings(&mut enc, &bundle, &mut reg).unwrap();
        let mut fresh = MweRegistry::new(Language::En);
        fresh.register("swan song", Language::En, &[]).unwrap();
        fresh.register("fish story", Language::En, &[]).unwrap();
        assert_eq!(assign_ids_from_vocab(&mut fresh, &enc.tokenizer), 2);
        assert_eq!(fresh.get("idiom_fish_story").unwrap().token_id, Some(11));
    }
}
