//! Masked-token pretraining for the toy encoders used at desk scale.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::nn::{Adam, AdamConfig, Tape};
use crate::registry::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlmConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub mask_prob: f64,
    pub optimizer: AdamConfig,
    pub seed: u64,
}

impl Default for MlmConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            mask_prob: 0.15,
            optimizer: AdamConfig::with_lr(3e-3),
            seed: 0,
        }
    }
}

/// BERT-style corruption: of the selected positions 80% become `[MASK]`,
/// 10% a random non-special token and 10% stay. At least one position is
/// always selected.
fn corrupt(ids: &[TokenId], enc: &Encoder, p: f64, rng: &mut ChaCha8Rng) -> (Vec<TokenId>, Vec<(usize, usize)>) {
    let mut input = ids.to_vec();
    let mut targets = Vec::new();
    let mut chosen: Vec<usize> = (0..ids.len()).filter(|_| rng.random::<f64>() < p).collect();
    if chosen.is_empty() {
        chosen.push(rng.random_range(0..ids.len()));
    }
    let vocab = enc.vocab_size() as TokenId;
    for pos in chosen {
        targets.push((pos, ids[pos] as usize));
        let roll: f64 = rng.random();
        if roll < 0.8 {
            input[pos] = enc.tokenizer.mask_id();
        } else if roll < 0.9 {
            loop {
                let t = rng.random_range(0..vocab);
                if !enc.tokenizer.is_special(t) {
                    input[pos] = t;
                    break;
                }
            }
        }
    }
    (input, targets)
}

/// Trains every encoder parameter on masked-token prediction. Returns the
/// mean loss of each epoch.
pub fn pretrain_mlm(enc: &mut Encoder, sentences: &[Vec<TokenId>], cfg: &MlmConfig) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.optimizer.clone());
    let max_len = enc.config.max_len;
    let data: Vec<&[TokenId]> = sentences
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| &s[..s.len().min(max_len)])
        .collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let examples: Vec<_> = batch
                .iter()
                .map(|&i| corrupt(data[i], enc, cfg.mask_prob, &mut rng))
                .collect();
            let grads = {
                let mut tape = Tape::new();
                let bound = enc.bind(&mut tape, true);
                let mut losses = Vec::with_capacity(examples.len());
                for (input, targets) in &examples {
                    let x = enc.embed_ids(&mut tape, &bound, input);
                    let h = enc.forward(&mut tape, &bound, x);
                    let logits = enc.mlm_logits(&mut tape, &bound, h);
                    losses.push(tape.cross_entropy(logits, targets));
                }
                let sum = tape.sum(&losses);
                let loss = tape.scale(sum, 1.0 / losses.len() as f64);
                total += tape.scalar(loss) * examples.len() as f64;
                let g = tape.backward(loss);
                bound.vars().iter().map(|&v| g.get(v).cloned()).collect::<Vec<_>>()
            };
            adam.step(enc.tensors_mut(), &grads);
        }
        history.push(total / data.len().max(1) as f64);
    }
    history
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::tokenizer::WordPiece;

    #[test]
    fn learns_a_deterministic_pattern() {
        let tok = WordPiece::from_pieces(["red", "apple", "green", "pear", "the", "is"]);
        let sentences: Vec<Vec<TokenId>> = ["the apple is red", "the pear is green"]
            .iter()
            .cycle()
            .take(40)
            .map(|s| tok.encode(s))
            .collect();
        let config = EncoderConfig {
            d_model: 16,
            n_layers: 1,
            d_ff: 32,
            max_len: 8,
            init_std: 0.1,
        };
        let mut enc = Encoder::new(config, tok, 1);
        let cfg = MlmConfig {
            epochs: 15,
            batch_size: 8,
            optimizer: AdamConfig::with_lr(1e-2),
            ..Default::default()
        };
        let history = pretrain_mlm(&mut enc, &sentences, &cfg);
        assert!(history.last().unwrap() < &(history[0] * 0.5), "{history:?}");
    }
}
