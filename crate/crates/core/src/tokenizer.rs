//! A lowercasing WordPiece tokenizer and the MWE-aware tokenization layer
//! that maps every registered expression onto exactly one token.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::{MweEntry, MweRegistry, TokenId};
use crate::text;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const SPECIALS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

const CONTINUATION: &str = "##";
const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct WordPiece {
    vocab: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl TryFrom<Vec<String>> for WordPiece {
    type Error = Error;

    fn try_from(vocab: Vec<String>) -> Result<Self> {
        WordPiece::new(vocab)
    }
}

impl From<WordPiece> for Vec<String> {
    fn from(wp: WordPiece) -> Self {
        wp.vocab
    }
}

impl WordPiece {
    /// Builds a tokenizer from an explicit vocabulary, which must contain the
    /// special tokens and no duplicates.
    pub fn new(vocab: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, piece) in vocab.iter().enumerate() {
            if index.insert(piece.clone(), i as TokenId).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary entry {piece:?}")));
            }
        }
        for special in SPECIALS {
            if !index.contains_key(special) {
                return Err(Error::InvalidArgument(format!("vocabulary lacks {special}")));
            }
        }
        Ok(Self { vocab, index })
    }

    /// Specials first, then the given pieces in order (duplicates skipped).
    pub fn from_pieces<I, S>(pieces: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = vocab.iter().cloned().collect();
        for p in pieces {
            let p = p.into();
            if seen.insert(p.clone()) {
                vocab.push(p);
            }
        }
        Self::new(vocab).expect("specials are present and pieces deduplicated")
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn id(&self, piece: &str) -> Option<TokenId> {
        self.index.get(piece).copied()
    }

    pub fn piece(&self, id: TokenId) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn unk_id(&self) -> TokenId {
        self.index[UNK]
    }

    pub fn mask_id(&self) -> TokenId {
        self.index[MASK]
    }

    pub fn pad_id(&self) -> TokenId {
        self.index[PAD]
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        self.piece(id).is_some_and(|p| SPECIALS.contains(&p))
    }

    /// Appends a new whole-unit token and returns its id.
    pub fn add_token(&mut self, piece: &str) -> Result<TokenId> {
        if self.index.contains_key(piece) {
            return Err(Error::AlreadyInjected(piece.to_string()));
        }
        let id = self.vocab.len() as TokenId;
        self.vocab.push(piece.to_string());
        self.index.insert(piece.to_string(), id);
        Ok(id)
    }

    /// Lowercases, splits on whitespace and isolates every non-alphanumeric
    /// character as its own word.
    pub fn pre_tokenize(text: &str) -> Vec<String> {
        let mut words = Vec::new();
        let mut current = String::new();
        for c in text.chars() {
            if c.is_whitespace() {
                if !current.is_empty() {
                    words.push(std::mem::take(&mut current));
                }
            } else if text::is_word_char(c) {
                current.extend(c.to_lowercase());
            } else {
                if !current.is_empty() {
                    words.push(std::mem::take(&mut current));
                }
                words.push(c.to_lowercase().collect());
            }
        }
        if !current.is_empty() {
            words.push(current);
        }
        words
    }

    fn word_pieces(&self, word: &str, out: &mut Vec<(TokenId, String)>) {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_WORD_CHARS {
            out.push((self.unk_id(), UNK.to_string()));
            return;
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while end > start {
                let mut candidate: String = chars[start..end].iter().collect();
                if start > 0 {
                    candidate.insert_str(0, CONTINUATION);
                }
                if let Some(id) = self.id(&candidate) {
                    found = Some((id, candidate));
                    break;
                }
                end -= 1;
            }
            match found {
                Some(piece) => {
                    pieces.push(piece);
                    start = end;
                }
                None => {
                    out.push((self.unk_id(), UNK.to_string()));
                    return;
                }
            }
        }
        out.extend(pieces);
    }

    /// `(id, piece)` pairs for `text`.
    pub fn tokenize(&self, text: &str) -> Vec<(TokenId, String)> {
        let mut out = Vec::new();
        for word in Self::pre_tokenize(text) {
            self.word_pieces(&word, &mut out);
        }
        out
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        self.tokenize(text).into_iter().map(|(id, _)| id).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        let pieces: Vec<&str> = ids.iter().map(|&id| self.piece(id).unwrap_or(UNK)).collect();
        join_pieces(pieces)
    }
}

fn join_pieces<'a>(pieces: impl IntoIterator<Item = &'a str>) -> String {
    let mut out = String::new();
    for piece in pieces {
        if let Some(rest) = piece.strip_prefix(CONTINUATION) {
            out.push_str(rest);
        } else {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(piece);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Token {
    Piece { id: TokenId, text: String },
    /// A whole registered expression. `id` is `None` before injection.
    Mwe {
        token_name: String,
        id: Option<TokenId>,
        matched: String,
    },
}

impl Token {
    pub fn is_mwe(&self) -> bool {
        matches!(self, Token::Mwe { .. })
    }

    pub fn id(&self) -> Option<TokenId> {
        match self {
            Token::Piece { id, .. } => Some(*id),
            Token::Mwe { id, .. } => *id,
        }
    }
}

/// Case-insensitive, word-bounded, longest-match-first segmentation. Earlier
/// registered entries win ties.
pub fn tokenize_with_mwes(sentence: &str, registry: &MweRegistry, base: &WordPiece) -> Vec<Token> {
    tokenize_with_entries(sentence, registry.entries(), base)
}

pub fn tokenize_with_entries(sentence: &str, entries: &[MweEntry], base: &WordPiece) -> Vec<Token> {
    let chars: Vec<char> = sentence.chars().collect();
    let folded: Vec<char> = chars.iter().map(|&c| text::fold_char(c)).collect();
    let patterns: Vec<(usize, Vec<char>)> = entries
        .iter()
        .enumerate()
        .flat_map(|(i, e)| e.forms().map(move |f| (i, text::fold(f))))
        .collect();

    let mut tokens = Vec::new();
    let mut pending_start = 0;
    let mut i = 0;
    while i < chars.len() {
        let at_boundary = i == 0 || !text::is_word_char(chars[i - 1]);
        let mut best: Option<(usize, usize)> = None;
        if at_boundary {
            for (entry, pattern) in &patterns {
                let end = i + pattern.len();
                if text::matches_at(&folded, i, pattern)
                    && text::bounded(&folded, i, end)
                    && best.is_none_or(|(_, len)| pattern.len() > len)
                {
                    best = Some((*entry, pattern.len()));
                }
            }
        }
        match best {
            Some((entry, len)) => {
                let before: String = chars[pending_start..i].iter().collect();
                push_base(&mut tokens, base, &before);
                let e = &entries[entry];
                tokens.push(Token::Mwe {
                    token_name: e.token_name.clone(),
                    id: e.token_id,
                    matched: chars[i..i + len].iter().collect(),
                });
                i += len;
                pending_start = i;
            }
            None => i += 1,
        }
    }
    let rest: String = chars[pending_start..].iter().collect();
    push_base(&mut tokens, base, &rest);
    tokens
}

fn push_base(tokens: &mut Vec<Token>, base: &WordPiece, span: &str) {
    tokens.extend(
        base.tokenize(span)
            .into_iter()
            .map(|(id, text)| Token::Piece { id, text }),
    );
}

/// Ids for a tokenized sentence, failing on expressions without an id.
pub fn token_ids(tokens: &[Token]) -> Result<Vec<TokenId>> {
    tokens
        .iter()
        .map(|t| match t {
            Token::Piece { id, .. } => Ok(*id),
            Token::Mwe { id: Some(id), .. } => Ok(*id),
            Token::Mwe { token_name, id: None, .. } => Err(Error::MissingTokenId(token_name.clone())),
        })
        .collect()
}

/// Decodes back to text; expressions come back as their matched span,
/// lowercased like every other word.
pub fn decode_tokens(tokens: &[Token]) -> String {
    let owned: Vec<String> = tokens
        .iter()
        .map(|t| match t {
            Token::Piece { text, .. } => text.clone(),
            Token::Mwe { matched, .. } => WordPiece::pre_tokenize(matched).join(" "),
        })
        .collect();
    join_pieces(owned.iter().map(String::as_str))
}
