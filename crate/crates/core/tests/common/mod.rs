#![allow(dead_code)]

use std::path::{Path, PathBuf};

use mwe_core::encoder::{Encoder, EncoderConfig};
use mwe_core::extraction::{ContextLabel, ContextRecord, ContextSet};
use mwe_core::{Language, MweRegistry, WordPiece};

pub fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

/// Rank by counting: 1 + (number strictly below) + half the other ties.
fn brute_ranks(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|&x| {
            let below = xs.iter().filter(|&&y| y < x).count() as f64;
            let equal = xs.iter().filter(|&&y| y == x).count() as f64;
            1.0 + below + (equal - 1.0) / 2.0
        })
        .collect()
}

/// Pearson correlation of brute-force ranks, or `None` when a side is constant.
pub fn oracle_spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let rx = brute_ranks(xs);
    let ry = brute_ranks(ys);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

pub const IDIOMS: [&str; 10] = [
    "swan song",
    "red tape",
    "big fish",
    "dark horse",
    "white elephant",
    "cold feet",
    "hot potato",
    "black sheep",
    "piece of cake",
    "break the ice",
];

pub const FILLER: [&str; 24] = [
    "the", "a", "of", "and", "was", "is", "his", "her", "it", "that", "old", "new", "man", "woman",
    "city", "house", "day", "night", "said", "gave", "saw", "there", "very", "again",
];

pub fn registry_of(surfaces: &[&str]) -> MweRegistry {
    let mut reg = MweRegistry::new(Language::En);
    for s in surfaces {
        reg.register(s, Language::En, &[]).unwrap();
    }
    reg
}

/// Filler words, every idiom word, and `.`/`,`.
pub fn small_vocab() -> WordPiece {
    let mut pieces: Vec<String> = FILLER.iter().map(|s| s.to_string()).collect();
    for i in IDIOMS {
        pieces.extend(i.split(' ').map(str::to_string));
    }
    pieces.extend([".", ",", "##s", "##ing"].map(str::to_string));
    WordPiece::from_pieces(pieces)
}

pub fn toy_encoder(tokenizer: WordPiece, d_model: usize, seed: u64) -> Encoder {
    let config = EncoderConfig {
        d_model,
        n_layers: 2,
        d_ff: 2 * d_model,
        max_len: 24,
        init_std: 0.2,
    };
    Encoder::new(config, tokenizer, seed)
}

pub fn context_set(token_name: &str, lines: &[&str]) -> ContextSet {
    ContextSet {
        mwe_token_name: token_name.to_string(),
        records: lines
            .iter()
            .enumerate()
            .map(|(i, l)| ContextRecord {
                mwe_token_name: token_name.to_string(),
                text: l.to_string(),
                source_file: "corpus.txt".into(),
                line_number: i + 1,
                match_offset: 0,
                label: ContextLabel::Unreviewed,
            })
            .collect(),
        ..Default::default()
    }
}
