//! Reference context miner and the manual curation workflow.
//!
//! Matching follows `grep -i " $val" -m N`: a line qualifies when it contains
//! the expression case-insensitively right after a space. Unlike grep, an
//! occurrence at the very start of a line also qualifies. One record is
//! produced per line, in file order, and the cap counts lines.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::registry::MweEntry;
use crate::text;

pub const DEFAULT_MAX_MATCHES: usize = 250;
pub const DEFAULT_CONTEXTS_PER_IDIOM: usize = 150;
pub const DEFAULT_GOLD_CONTEXTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextLabel {
    Unreviewed,
    Ok,
    ProperNoun,
    Misuse,
}

impl ContextLabel {
    pub fn is_rejected(self) -> bool {
        matches!(self, ContextLabel::ProperNoun | ContextLabel::Misuse)
    }
}

/// One corpus line containing an occurrence. `match_offset` counts chars.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextRecord {
    pub mwe_token_name: String,
    pub text: String,
    pub source_file: String,
    pub line_number: usize,
    pub match_offset: usize,
    pub label: ContextLabel,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ContextSet {
    pub mwe_token_name: String,
    pub records: Vec<ContextRecord>,
    pub corpus_id: String,
    pub extraction_config_hash: String,
    pub warnings: Vec<String>,
}

impl ContextSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn with_records(&self, records: Vec<ContextRecord>) -> ContextSet {
        ContextSet {
            mwe_token_name: self.mwe_token_name.clone(),
            records,
            corpus_id: self.corpus_id.clone(),
            extraction_config_hash: self.extraction_config_hash.clone(),
            warnings: Vec::new(),
        }
    }

    /// Line-delimited JSON, one record per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ContextSet> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: ContextRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            records.push(record);
        }
        let mwe_token_name = records
            .first()
            .map(|r| r.mwe_token_name.clone())
            .unwrap_or_default();
        Ok(ContextSet {
            mwe_token_name,
            records,
            ..Default::default()
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExtractOptions {
    pub max_matches: usize,
    pub dedup_exact: bool,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self {
            max_matches: DEFAULT_MAX_MATCHES,
            dedup_exact: false,
        }
    }
}

/// Earliest char offset where any pattern occurs after a space or at the
/// start of the line.
pub fn grep_offset(folded_line: &[char], patterns: &[Vec<char>]) -> Option<usize> {
    (0..folded_line.len()).find(|&i| {
        (i == 0 || folded_line[i - 1] == ' ')
            && patterns.iter().any(|p| text::matches_at(folded_line, i, p))
    })
}

fn corpus_id(path: &Path) -> Result<String> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{}:{}", source_name(path), meta.len()))
}

pub fn source_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string_lossy().into_owned())
}

pub fn config_hash(corpus_id: &str, token_name: &str, forms: &[&str], opts: &ExtractOptions) -> String {
    let doc = serde_json::json!({
        "corpus_id": corpus_id,
        "token_name": token_name,
        "forms": forms,
        "max_matches": opts.max_matches,
        "dedup_exact": opts.dedup_exact,
    });
    hex::encode(Sha256::digest(doc.to_string().as_bytes()))
}

/// Mines up to 250 lines (or `max_matches`) containing the expression.
pub fn extract_contexts(corpus: &Path, entry: &MweEntry, max_matches: usize) -> Result<ContextSet> {
    extract_contexts_with(
        corpus,
        entry,
        &ExtractOptions {
            max_matches,
            ..Default::default()
        },
    )
}

pub fn extract_contexts_with(corpus: &Path, entry: &MweEntry, opts: &ExtractOptions) -> Result<ContextSet> {
    let forms: Vec<&str> = entry.forms().collect();
    extract_pattern(corpus, &entry.token_name, &forms, opts)
}

/// Grep-style extraction for an arbitrary list of surface forms. Also used for
/// single words when collecting mimicking contexts.
pub fn extract_pattern(
    corpus: &Path,
    token_name: &str,
    forms: &[&str],
    opts: &ExtractOptions,
) -> Result<ContextSet> {
    if opts.max_matches == 0 {
        return Err(Error::InvalidArgument("max_matches must be at least 1".into()));
    }
    let corpus_id = corpus_id(corpus)?;
    let source_file = source_name(corpus);
    let patterns: Vec<Vec<char>> = forms.iter().map(|f| text::fold(f)).collect();
    let file = File::open(corpus).map_err(|e| Error::io(corpus, e))?;
    let mut reader = BufReader::new(file);

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let mut buf = Vec::new();
    let mut line_number = 0;
    while records.len() < opts.max_matches {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf).map_err(|e| Error::io(corpus, e))?;
        if n == 0 {
            break;
        }
        line_number += 1;
        if buf.last() == Some(&b'\n') {
            buf.pop();
        }
        let line = String::from_utf8_lossy(&buf);
        let folded = text::fold(&line);
        let Some(offset) = grep_offset(&folded, &patterns) else {
            continue;
        };
        if opts.dedup_exact && !seen.insert(line.to_string()) {
            continue;
        }
        records.push(ContextRecord {
            mwe_token_name: token_name.to_string(),
            text: line.into_owned(),
            source_file: source_file.clone(),
            line_number,
            match_offset: offset,
            label: ContextLabel::Unreviewed,
        });
    }

    let mut warnings = Vec::new();
    if records.is_empty() {
        let msg = format!("no occurrences of {token_name} in {source_file}");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok(ContextSet {
        mwe_token_name: token_name.to_string(),
        extraction_config_hash: config_hash(&corpus_id, token_name, forms, opts),
        corpus_id,
        records,
        warnings,
    })
}

fn seeded_indices(len: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, len, k).into_vec();
    picked.sort_unstable();
    picked
}

/// Seeded uniform subset of size `k`, keeping file order.
pub fn sample_contexts(set: &ContextSet, k: usize, seed: u64) -> Result<ContextSet> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if k >= set.len() {
        return Ok(set.clone());
    }
    let records = seeded_indices(set.len(), k, seed)
        .into_iter()
        .map(|i| set.records[i].clone())
        .collect();
    Ok(set.with_records(records))
}

/// Keeps records where the expression also occurs with a word boundary on
/// both sides, i.e. where MWE-aware tokenization will find it. Grep-style
/// extraction also accepts prefixes such as "swan songs".
pub fn retain_matchable(set: &ContextSet, entry: &MweEntry) -> ContextSet {
    let patterns: Vec<Vec<char>> = entry.forms().map(text::fold).collect();
    let records = set
        .records
        .iter()
        .filter(|r| {
            let folded = text::fold(&r.text);
            patterns.iter().any(|p| text::count_bounded(&folded, p) > 0)
        })
        .cloned()
        .collect();
    set.with_records(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRow {
    pub mwe: String,
    pub source_file: String,
    pub line_number: usize,
    pub text: String,
    pub label: ContextLabel,
}

/// Writes an editable JSONL template with every label set to `unreviewed`.
pub fn emit_annotation_template(set: &ContextSet, out: &Path) -> Result<()> {
    let file = File::create(out).map_err(|e| Error::io(out, e))?;
    let mut w = BufWriter::new(file);
    for r in &set.records {
        let row = AnnotationRow {
            mwe: r.mwe_token_name.clone(),
            source_file: r.source_file.clone(),
            line_number: r.line_number,
            text: r.text.clone(),
            label: ContextLabel::Unreviewed,
        };
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n").map_err(|e| Error::io(out, e))?;
    }
    w.flush().map_err(|e| Error::io(out, e))
}

/// Applies reviewed labels, dropping proper-noun and misuse lines.
pub fn apply_curation(set: &ContextSet, annotations: &Path) -> Result<ContextSet> {
    let content = fs::read_to_string(annotations).map_err(|e| Error::io(annotations, e))?;
    let known: HashSet<(&str, usize)> = set
        .records
        .iter()
        .map(|r| (r.source_file.as_str(), r.line_number))
        .collect();
    let mut labels: HashMap<(String, usize), ContextLabel> = HashMap::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: AnnotationRow = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: annotations.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let dangling = row.mwe != set.mwe_token_name
            || !known.contains(&(row.source_file.as_str(), row.line_number));
        if dangling {
            return Err(Error::DanglingAnnotation {
                source_file: row.source_file,
                line_number: row.line_number,
            });
        }
        labels.insert((row.source_file, row.line_number), row.label);
    }
    let records = set
        .records
        .iter()
        .filter_map(|r| {
            let mut r = r.clone();
            if let Some(&label) = labels.get(&(r.source_file.clone(), r.line_number)) {
                r.label = label;
            }
            (!r.label.is_rejected()).then_some(r)
        })
        .collect();
    Ok(set.with_records(records))
}

/// Seeded sample of `min(n, |set|)` curated records.
pub fn gold_sample(set: &ContextSet, n: usize, seed: u64) -> Result<ContextSet> {
    if set.records.iter().any(|r| r.label.is_rejected()) {
        return Err(Error::NotCurated(set.mwe_token_name.clone()));
    }
    sample_contexts(set, n, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{Language, MweRegistry};

    fn entry(surface: &str) -> MweEntry {
        MweRegistry::new(Language::En)
            .register(surface, Language::En, &[])
            .unwrap()
    }

    fn corpus(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    fn set_of(n: usize) -> ContextSet {
        ContextSet {
            mwe_token_name: "idiom_fish_story".into(),
            records: (1..=n)
                .map(|i| ContextRecord {
                    mwe_token_name: "idiom_fish_story".into(),
                    text: format!("line {i} a fish story"),
                    source_file: "c.txt".into(),
                    line_number: i,
                    match_offset: 9,
                    label: ContextLabel::Unreviewed,
                })
                .collect(),
            ..Default::default()
        }
    }

    #[test]
    fn grep_semantics() {
        let c = corpus(&[
            "Swan song at the start",
            "his SWAN SONG in office",
            "no match: swansong",
            "a.swan song after a dot",
            "swan songs are prefixes too",
            "twice: swan song and swan song",
        ]);
        let set = extract_contexts(c.path(), &entry("swan song"), 250).unwrap();
        let lines: Vec<usize> = set.records.iter().map(|r| r.line_number).collect();
        assert_eq!(lines, vec![1, 2, 5, 6]);
        assert_eq!(set.records[1].match_offset, 4);
        assert_eq!(set.records[3].match_offset, 7);
        assert!(set.warnings.is_empty());
    }

    #[test]
    fn cap_counts_lines_in_file_order() {
        let lines: Vec<String> = (0..300).map(|i| format!("{i} a swan song")).collect();
        let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
        let c = corpus(&refs);
        let set = extract_contexts(c.path(), &entry("swan song"), 250).unwrap();
        assert_eq!(set.len(), 250);
        assert_eq!(set.records.last().unwrap().line_number, 250);
    }

    #[test]
    fn absent_idiom_warns() {
        let c = corpus(&["nothing here"]);
        let set = extract_contexts(c.path(), &entry("swan song"), 250).unwrap();
        assert!(set.is_empty());
        assert_eq!(set.warnings.len(), 1);
    }

    #[test]
    fn invalid_utf8_is_replaced() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(b"bad \xff byte swan song\n").unwrap();
        let set = extract_contexts(f.path(), &entry("swan song"), 250).unwrap();
        assert_eq!(set.len(), 1);
        assert!(set.records[0].text.contains('\u{FFFD}'));
        assert_eq!(set.records[0].match_offset, 11);
    }

    #[test]
    fn dedup_is_opt_in() {
        let c = corpus(&["a swan song", "a swan song"]);
        let e = entry("swan song");
        assert_eq!(extract_contexts(c.path(), &e, 250).unwrap().len(), 2);
        let opts = ExtractOptions {
            dedup_exact: true,
            ..Default::default()
        };
        assert_eq!(extract_contexts_with(c.path(), &e, &opts).unwrap().len(), 1);
    }

    #[test]
    fn sampling_contract() {
        let set = set_of(3);
        assert_eq!(sample_contexts(&set, 10, 1).unwrap(), set);
        assert!(sample_contexts(&set, 0, 1).is_err());
        let big = set_of(40);
        let a = sample_contexts(&big, 5, 7).unwrap();
        assert_eq!(a, sample_contexts(&big, 5, 7).unwrap());
        assert_eq!(a.len(), 5);
        assert!(a.records.windows(2).all(|w| w[0].line_number < w[1].line_number));
    }

    #[test]
    fn template_and_curation() {
        let set = set_of(4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.jsonl");
        emit_annotation_template(&set, &path).unwrap();
        let first = fs::read(&path).unwrap();
        emit_annotation_template(&set, &path).unwrap();
        assert_eq!(first, fs::read(&path).unwrap());

        let edited = String::from_utf8(first)
            .unwrap()
            .lines()
            .enumerate()
            .map(|(i, l)| match i {
                1 => l.replace("unreviewed", "proper_noun"),
                2 => l.replace("unreviewed", "ok"),
                _ => l.to_string(),
            })
            .collect::<Vec<_>>()
            .join("\n");
        fs::write(&path, edited).unwrap();
        let curated = apply_curation(&set, &path).unwrap();
        let lines: Vec<usize> = curated.records.iter().map(|r| r.line_number).collect();
        assert_eq!(lines, vec![1, 3, 4]);
        assert_eq!(curated.records[1].label, ContextLabel::Ok);
    }

    #[test]
    fn curation_errors() {
        let set = set_of(2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.jsonl");
        fs::write(&path, "{\"mwe\":\"idiom_fish_story\",\"source_file\":\"c.txt\",\"line_number\":1,\"text\":\"\",\"label\":\"ok\"}\nnot json\n").unwrap();
        assert!(matches!(apply_curation(&set, &path), Err(Error::Parse { line: 2, .. })));
        fs::write(&path, "{\"mwe\":\"idiom_fish_story\",\"source_file\":\"c.txt\",\"line_number\":9,\"text\":\"\",\"label\":\"ok\"}\n").unwrap();
        assert!(matches!(apply_curation(&set, &path), Err(Error::DanglingAnnotation { .. })));
        fs::write(&path, "{\"mwe\":\"idiom_swan_song\",\"source_file\":\"c.txt\",\"line_number\":1,\"text\":\"\",\"label\":\"ok\"}\n").unwrap();
        assert!(matches!(apply_curation(&set, &path), Err(Error::DanglingAnnotation { .. })));
    }

    #[test]
    fn gold_sampling() {
        let set = set_of(200);
        let a = gold_sample(&set, 10, 1).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a, gold_sample(&set, 10, 1).unwrap());
        assert_eq!(gold_sample(&set_of(6), 10, 1).unwrap().len(), 6);
        let mut dirty = set_of(3);
        dirty.records[0].label = ContextLabel::ProperNoun;
        assert!(matches!(gold_sample(&dirty, 10, 1), Err(Error::NotCurated(_))));
    }

    #[test]
    fn matchable_filter_drops_prefix_hits() {
        let c = corpus(&["swan songs only", "a swan song"]);
        let e = entry("swan song");
        let set = extract_contexts(c.path(), &e, 250).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(retain_matchable(&set, &e).len(), 1);
    }

    #[test]
    fn jsonl_roundtrip() {
        let set = set_of(3);
        let f = tempfile::NamedTempFile::new().unwrap();
        set.save(f.path()).unwrap();
        let back = ContextSet::load(f.path()).unwrap();
        assert_eq!(back.records, set.records);
        let first = set.to_jsonl().lines().next().unwrap().to_string();
        assert_eq!(
            first,
            r#"{"mwe_token_name":"idiom_fish_story","text":"line 1 a fish story","source_file":"c.txt","line_number":1,"match_offset":9,"label":"unreviewed"}"#
        );
    }
}
