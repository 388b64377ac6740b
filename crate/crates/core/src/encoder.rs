//! A small post-LayerNorm transformer encoder with a tied masked-LM head.
//!
//! The encoder owns its [`WordPiece`] vocabulary so that vocabulary growth
//! (see `injection`) keeps the tokenizer and the embedding matrix in step.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Matrix, Tape, Var};
use crate::registry::TokenId;
use crate::tokenizer::WordPiece;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_layers: 2,
            d_ff: 64,
            max_len: 64,
            init_std: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub bq: Matrix,
    pub wk: Matrix,
    pub bk: Matrix,
    pub wv: Matrix,
    pub bv: Matrix,
    pub wo: Matrix,
    pub bo: Matrix,
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
}

const LAYER_TENSORS: usize = 16;
const HEAD_TENSORS: usize = 5;
const STEM_TENSORS: usize = 4;

impl LayerWeights {
    fn new(d: usize, f: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            wq: Matrix::randn(d, d, std, rng),
            bq: Matrix::zeros(1, d),
            wk: Matrix::randn(d, d, std, rng),
            bk: Matrix::zeros(1, d),
            wv: Matrix::randn(d, d, std, rng),
            bv: Matrix::zeros(1, d),
            wo: Matrix::randn(d, d, std, rng),
            bo: Matrix::zeros(1, d),
            ln1_gain: Matrix::filled(1, d, 1.0),
            ln1_bias: Matrix::zeros(1, d),
            w1: Matrix::randn(d, f, std, rng),
            b1: Matrix::zeros(1, f),
            w2: Matrix::randn(f, d, std, rng),
            b2: Matrix::zeros(1, d),
            ln2_gain: Matrix::filled(1, d, 1.0),
            ln2_bias: Matrix::zeros(1, d),
        }
    }

    fn tensors(&self) -> [&Matrix; LAYER_TENSORS] {
        [
            &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo,
            &self.ln1_gain, &self.ln1_bias, &self.w1, &self.b1, &self.w2, &self.b2, &self.ln2_gain,
            &self.ln2_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix; LAYER_TENSORS] {
        [
            &mut self.wq, &mut self.bq, &mut self.wk, &mut self.bk, &mut self.wv, &mut self.bv,
            &mut self.wo, &mut self.bo, &mut self.ln1_gain, &mut self.ln1_bias, &mut self.w1,
            &mut self.b1, &mut self.w2, &mut self.b2, &mut self.ln2_gain, &mut self.ln2_bias,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderWeights {
    /// Input embeddings, shared with the masked-LM output projection.
    pub token_emb: Matrix,
    pub pos_emb: Matrix,
    pub emb_ln_gain: Matrix,
    pub emb_ln_bias: Matrix,
    pub layers: Vec<LayerWeights>,
    pub mlm_dense_w: Matrix,
    pub mlm_dense_b: Matrix,
    pub mlm_ln_gain: Matrix,
    pub mlm_ln_bias: Matrix,
    pub mlm_out_bias: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub tokenizer: WordPiece,
    pub weights: EncoderWeights,
}

/// Tape handles for every encoder tensor, in [`Encoder::tensors`] order.
pub struct BoundEncoder {
    vars: Vec<Var>,
}

impl BoundEncoder {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn token_emb(&self) -> Var {
        self.vars[0]
    }

    fn pos_emb(&self) -> Var {
        self.vars[1]
    }

    fn stem_ln(&self) -> (Var, Var) {
        (self.vars[2], self.vars[3])
    }

    fn layer(&self, i: usize) -> &[Var] {
        let start = STEM_TENSORS + i * LAYER_TENSORS;
        &self.vars[start..start + LAYER_TENSORS]
    }

    fn head(&self) -> &[Var] {
        &self.vars[self.vars.len() - HEAD_TENSORS..]
    }
}

impl Encoder {
    pub fn new(config: EncoderConfig, tokenizer: WordPiece, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f, std) = (config.d_model, config.d_ff, config.init_std);
        let vocab = tokenizer.len();
        let weights = EncoderWeights {
            token_emb: Matrix::randn(vocab, d, std, &mut rng),
            pos_emb: Matrix::randn(config.max_len, d, std, &mut rng),
            emb_ln_gain: Matrix::filled(1, d, 1.0),
            emb_ln_bias: Matrix::zeros(1, d),
            layers: (0..config.n_layers)
                .map(|_| LayerWeights::new(d, f, std, &mut rng))
                .collect(),
            mlm_dense_w: Matrix::randn(d, d, std, &mut rng),
            mlm_dense_b: Matrix::zeros(1, d),
            mlm_ln_gain: Matrix::filled(1, d, 1.0),
            mlm_ln_bias: Matrix::zeros(1, d),
            mlm_out_bias: Matrix::zeros(1, vocab),
        };
        Self {
            config,
            tokenizer,
            weights,
        }
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.token_emb.rows()
    }

    pub fn embedding_row(&self, id: TokenId) -> &[f64] {
        self.weights.token_emb.row(id as usize)
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        let w = &self.weights;
        let mut out = vec![&w.token_emb, &w.pos_emb, &w.emb_ln_gain, &w.emb_ln_bias];
        for layer in &w.layers {
            out.extend(layer.tensors());
        }
        out.extend([&w.mlm_dense_w, &w.mlm_dense_b, &w.mlm_ln_gain, &w.mlm_ln_bias, &w.mlm_out_bias]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let w = &mut self.weights;
        let mut out = vec![&mut w.token_emb, &mut w.pos_emb, &mut w.emb_ln_gain, &mut w.emb_ln_bias];
        for layer in &mut w.layers {
            out.extend(layer.tensors_mut());
        }
        out.extend([
            &mut w.mlm_dense_w,
            &mut w.mlm_dense_b,
            &mut w.mlm_ln_gain,
            &mut w.mlm_ln_bias,
            &mut w.mlm_out_bias,
        ]);
        out
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> BoundEncoder {
        BoundEncoder {
            vars: self.tensors().into_iter().map(|m| tape.leaf(m, trainable)).collect(),
        }
    }

    pub fn embed_ids(&self, tape: &mut Tape<'_>, bound: &BoundEncoder, ids: &[TokenId]) -> Var {
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        tape.gather(bound.token_emb(), &idx)
    }

    /// Runs the stack over `n × d` input embeddings (positions are added here).
    pub fn forward(&self, tape: &mut Tape<'_>, bound: &BoundEncoder, inputs: Var) -> Var {
        let n = tape.value(inputs).rows();
        assert!(n <= self.config.max_len, "sequence of {n} exceeds max_len");
        let positions: Vec<usize> = (0..n).collect();
        let pos = tape.gather(bound.pos_emb(), &positions);
        let x = tape.add(inputs, pos);
        let (g, b) = bound.stem_ln();
        let mut x = tape.layer_norm(x, g, b);
        let scale = 1.0 / (self.config.d_model as f64).sqrt();
        for i in 0..self.config.n_layers {
            let p = bound.layer(i);
            let q = tape.linear(x, p[0], p[1]);
            let k = tape.linear(x, p[2], p[3]);
            let v = tape.linear(x, p[4], p[5]);
            let scores = tape.matmul_bt(q, k);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            let ctx = tape.matmul(attn, v);
            let out = tape.linear(ctx, p[6], p[7]);
            let h = tape.add(x, out);
            let h = tape.layer_norm(h, p[8], p[9]);
            let f = tape.linear(h, p[10], p[11]);
            let f = tape.gelu(f);
            let f = tape.linear(f, p[12], p[13]);
            let y = tape.add(h, f);
            x = tape.layer_norm(y, p[14], p[15]);
        }
        x
    }

    /// Vocabulary logits for hidden states, using the tied input embeddings.
    pub fn mlm_logits(&self, tape: &mut Tape<'_>, bound: &BoundEncoder, hidden: Var) -> Var {
        let h = bound.head();
        let t = tape.linear(hidden, h[0], h[1]);
        let t = tape.gelu(t);
        let t = tape.layer_norm(t, h[2], h[3]);
        let logits = tape.matmul_bt(t, bound.token_emb());
        tape.add_row(logits, h[4])
    }

    /// Final-layer outputs for a token id sequence (inference).
    pub fn encode_ids(&self, ids: &[TokenId]) -> Matrix {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = self.embed_ids(&mut tape, &bound, ids);
        let out = self.forward(&mut tape, &bound, x);
        tape.value(out).clone()
    }

    /// Content hash over the configuration, the vocabulary and all weights.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for piece in self.tokenizer.vocab() {
            h.update(piece.as_bytes());
            h.update([0]);
        }
        for m in self.tensors() {
            for v in m.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..16])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let enc: Encoder = serde_json::from_str(&json)?;
        if enc.vocab_size() != enc.tokenizer.len() {
            return Err(Error::Format(format!(
                "embedding rows ({}) disagree with vocabulary size ({})",
                enc.vocab_size(),
                enc.tokenizer.len()
            )));
        }
        Ok(enc)
    }
}
