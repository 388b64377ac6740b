//! Inventory of multi-word expressions and their single-token identities.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    En,
    Pt,
    Gl,
}

impl Language {
    pub fn code(self) -> &'static str {
        match self {
            Language::En => "en",
            Language::Pt => "pt",
            Language::Gl => "gl",
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Language {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "en" => Ok(Language::En),
            "pt" => Ok(Language::Pt),
            "gl" => Ok(Language::Gl),
            other => Err(Error::UnsupportedLanguage(other.to_string())),
        }
    }
}

/// A registered multi-word expression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MweEntry {
    pub surface: String,
    pub language: Language,
    pub variants: Vec<String>,
    pub token_name: String,
    /// Vocabulary index, only known once the embedding has been injected.
    #[serde(skip)]
    pub token_id: Option<TokenId>,
}

impl MweEntry {
    /// Surface followed by the variants, in match-priority order.
    pub fn forms(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.surface.as_str()).chain(self.variants.iter().map(String::as_str))
    }

    pub fn words(&self) -> Vec<&str> {
        self.surface.split_whitespace().collect()
    }
}

/// `"idiom_"` + the lowercased words joined by `_`.
pub fn token_name_for(surface: &str) -> String {
    let words: Vec<String> = surface.split_whitespace().map(str::to_lowercase).collect();
    format!("idiom_{}", words.join("_"))
}

fn validate_surface(surface: &str) -> Result<()> {
    if surface.split_whitespace().count() < 2 {
        return Err(Error::InvalidMwe(surface.to_string()));
    }
    Ok(())
}

/// Ordered collection of entries for one language. Iteration order is
/// registration order, which also drives token id assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct MweRegistry {
    language: Language,
    entries: Vec<MweEntry>,
}

impl MweRegistry {
    pub fn new(language: Language) -> Self {
        Self {
            language,
            entries: Vec::new(),
        }
    }

    pub fn language(&self) -> Language {
        self.language
    }

    pub fn entries(&self) -> &[MweEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, token_name: &str) -> Option<&MweEntry> {
        self.entries.iter().find(|e| e.token_name == token_name)
    }

    pub fn position(&self, token_name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.token_name == token_name)
    }

    pub fn register(
        &mut self,
        surface: &str,
        language: Language,
        variants: &[String],
    ) -> Result<MweEntry> {
        validate_surface(surface)?;
        if language != self.language {
            return Err(Error::UnsupportedLanguage(format!(
                "{language} in a {} registry",
                self.language
            )));
        }
        let token_name = token_name_for(surface);
        if let Some(existing) = self.get(&token_name) {
            if existing.surface == surface {
                return Ok(existing.clone());
            }
            return Err(Error::NameCollision {
                token_name,
                surface: surface.to_string(),
                existing: existing.surface.clone(),
            });
        }
        let mut kept: Vec<String> = Vec::new();
        for v in variants {
            let v = v.trim();
            if v.is_empty() || v == surface || kept.iter().any(|k| k == v) {
                continue;
            }
            kept.push(v.to_string());
        }
        let entry = MweEntry {
            surface: surface.to_string(),
            language,
            variants: kept,
            token_name,
            token_id: None,
        };
        self.entries.push(entry.clone());
        Ok(entry)
    }

    pub fn assign_token_id(&mut self, token_name: &str, id: TokenId) -> Result<()> {
        let entry = self
            .entries
            .iter_mut()
            .find(|e| e.token_name == token_name)
            .ok_or_else(|| Error::UnregisteredMwe(token_name.to_string()))?;
        entry.token_id = Some(id);
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.entries)?)
    }

    /// Parses a registry document. Every row is re-validated, so a hand-edited
    /// file cannot smuggle in one-word surfaces or mismatched token names.
    pub fn from_json(language: Language, json: &str) -> Result<Self> {
        let rows: Vec<MweEntry> = serde_json::from_str(json)?;
        let mut registry = Self::new(language);
        for row in rows {
            let entry = registry.register(&row.surface, row.language, &row.variants)?;
            if entry.token_name != row.token_name {
                return Err(Error::Format(format!(
                    "token_name {:?} does not match surface {:?} (expected {:?})",
                    row.token_name, row.surface, entry.token_name
                )));
            }
        }
        Ok(registry)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let rows: Vec<MweEntry> = serde_json::from_str(&json)?;
        let language = rows.first().map(|r| r.language).unwrap_or(Language::En);
        Self::from_json(language, &json)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn swan_song_token_name() {
        let mut r = MweRegistry::new(Language::En);
        let e = r.register("swan song", Language::En, &[]).unwrap();
        assert_eq!(e.token_name, "idiom_swan_song");
        assert_eq!(e.token_id, None);
    }

    #[test]
    fn registration_is_idempotent() {
        let mut r = MweRegistry::new(Language::En);
        let a = r.register("swan song", Language::En, &[]).unwrap();
        let b = r.register("swan song", Language::En, &[]).unwrap();
        assert_eq!(a, b);
        assert_eq!(r.len(), 1);
    }

    #[test]
    fn single_word_rejected() {
        let mut r = MweRegistry::new(Language::En);
        assert!(matches!(
            r.register("kumquat", Language::En, &[]),
            Err(Error::InvalidMwe(_))
        ));
        assert!(matches!(
            r.register("   ", Language::En, &[]),
            Err(Error::InvalidMwe(_))
        ));
    }

    #[test]
    fn casing_collision() {
        let mut r = MweRegistry::new(Language::En);
        r.register("swan song", Language::En, &[]).unwrap();
        assert!(matches!(
            r.register("Swan Song", Language::En, &[]),
            Err(Error::NameCollision { .. })
        ));
    }

    #[test]
    fn variants_are_cleaned() {
        let mut r = MweRegistry::new(Language::En);
        let e = r
            .register(
                "swan song",
                Language::En,
                &["".into(), "swan song".into(), "swan songs".into(), "swan songs".into()],
            )
            .unwrap();
        assert_eq!(e.variants, vec!["swan songs".to_string()]);
    }

    #[test]
    fn json_has_stable_key_order() {
        let mut r = MweRegistry::new(Language::En);
        r.register("swan song", Language::En, &["swan songs".into()]).unwrap();
        let json = serde_json::to_string(r.entries()).unwrap();
        assert_eq!(
            json,
            r#"[{"surface":"swan song","language":"en","variants":["swan songs"],"token_name":"idiom_swan_song"}]"#
        );
        let back = MweRegistry::from_json(Language::En, &json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn tampered_token_name_rejected() {
        let json = r#"[{"surface":"swan song","language":"en","variants":[],"token_name":"idiom_x"}]"#;
        assert!(MweRegistry::from_json(Language::En, json).is_err());
    }
}
