//! Spearman-rank evaluation over the ALL / Idiom / STS splits, per-idiom
//! breakdowns and corpus rarity statistics.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::{MweEntry, MweRegistry};
use crate::sts::{StsPair, Subset};
use crate::text;

pub const DEFAULT_MIN_OCCURRENCES: usize = 5;

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && xs[order[end]] == xs[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    Ok((cov / (vx * vy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rank correlation: Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(Error::UndefinedCorrelation);
    }
    if xs.iter().chain(ys).any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("NaN in correlation input".into()));
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdiomScore {
    pub n: usize,
    pub sr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub language: String,
    pub sr_all: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sr_idiom: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sr_sts: Option<f64>,
    #[serde(default)]
    pub per_idiom: BTreeMap<String, IdiomScore>,
}

fn fmt_sr(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub const TABLE_HEADER: &'static str = "Setting\tLanguage(s)\tSR ALL\tSR Idiom\tSR STS";

    /// One row in the `Setting / Language(s) / SR ALL / SR Idiom / SR STS`
    /// layout; absent splits print as `-`.
    pub fn table_row(&self, setting: &str) -> String {
        format!(
            "{setting}\t{}\t{:.4}\t{}\t{}",
            self.language,
            self.sr_all,
            fmt_sr(self.sr_idiom),
            fmt_sr(self.sr_sts)
        )
    }
}

fn language_label(pairs: &[StsPair]) -> String {
    match pairs.first() {
        Some(first) if pairs.iter().all(|p| p.language == first.language) => first.language.to_string(),
        _ => "all".into(),
    }
}

fn subset_sr(predictions: &[f64], pairs: &[StsPair], subset: Subset) -> Result<Option<f64>> {
    let (p, g): (Vec<f64>, Vec<f64>) = predictions
        .iter()
        .zip(pairs)
        .filter(|(_, pair)| pair.subset == subset)
        .map(|(p, pair)| (*p, pair.gold_score))
        .unzip();
    if p.is_empty() {
        return Ok(None);
    }
    spearman(&p, &g).map(Some)
}

/// Correlations over all pairs and over each subset separately.
pub fn evaluate(predictions: &[f64], pairs: &[StsPair]) -> Result<EvalReport> {
    if predictions.len() != pairs.len() {
        return Err(Error::LengthMismatch(predictions.len(), pairs.len()));
    }
    let gold: Vec<f64> = pairs.iter().map(|p| p.gold_score).collect();
    Ok(EvalReport {
        language: language_label(pairs),
        sr_all: spearman(predictions, &gold)?,
        sr_idiom: subset_sr(predictions, pairs, Subset::Idiom)?,
        sr_sts: subset_sr(predictions, pairs, Subset::General)?,
        per_idiom: BTreeMap::new(),
    })
}

/// Per-idiom correlations over idiom-subset pairs. Groups smaller than
/// `min_occurrences` are dropped, as are groups whose gold or predicted
/// scores are constant (their correlation is undefined).
pub fn per_idiom_analysis(
    predictions: &[f64],
    pairs: &[StsPair],
    idiom_of: &BTreeMap<usize, String>,
    min_occurrences: usize,
) -> Result<BTreeMap<String, IdiomScore>> {
    if predictions.len() != pairs.len() {
        return Err(Error::LengthMismatch(predictions.len(), pairs.len()));
    }
    let mut groups: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (i, pair) in pairs.iter().enumerate() {
        if pair.subset != Subset::Idiom {
            continue;
        }
        let idiom = idiom_of.get(&i).ok_or(Error::MissingGrouping(i))?;
        let g = groups.entry(idiom.as_str()).or_default();
        g.0.push(predictions[i]);
        g.1.push(pair.gold_score);
    }
    let mut out = BTreeMap::new();
    for (idiom, (p, g)) in groups {
        if p.len() < min_occurrences {
            continue;
        }
        match spearman(&p, &g) {
            Ok(sr) => {
                out.insert(idiom.to_string(), IdiomScore { n: p.len(), sr });
            }
            Err(Error::UndefinedCorrelation) => log::warn!("correlation undefined for {idiom}"),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Maps each idiom-subset pair to the first registered expression found in
/// sentence A, else in sentence B.
pub fn idiom_of_pairs(pairs: &[StsPair], registry: &MweRegistry) -> BTreeMap<usize, String> {
    let patterns: Vec<(&str, Vec<Vec<char>>)> = registry
        .entries()
        .iter()
        .map(|e| (e.token_name.as_str(), e.forms().map(text::fold).collect()))
        .collect();
    let find = |s: &str| {
        let folded = text::fold(s);
        patterns
            .iter()
            .filter_map(|(name, forms)| {
                forms
                    .iter()
                    .filter_map(|f| first_bounded(&folded, f))
                    .min()
                    .map(|pos| (pos, *name))
            })
            .min_by_key(|(pos, _)| *pos)
            .map(|(_, name)| name.to_string())
    };
    pairs
        .iter()
        .enumerate()
        .filter(|(_, p)| p.subset == Subset::Idiom)
        .filter_map(|(i, p)| find(&p.sentence_a).or_else(|| find(&p.sentence_b)).map(|n| (i, n)))
        .collect()
}

fn first_bounded(hay: &[char], pattern: &[char]) -> Option<usize> {
    (0..hay.len()).find(|&i| text::matches_at(hay, i, pattern) && text::bounded(hay, i, i + pattern.len()))
}

/// Occurrences of the expression divided by the mean occurrence count of its
/// constituent words (case-insensitive, word-bounded).
pub fn rarity_stats(corpus: &Path, entry: &MweEntry) -> Result<f64> {
    let words: Vec<Vec<char>> = entry.words().into_iter().map(text::fold).collect();
    let forms: Vec<Vec<char>> = entry.forms().map(text::fold).collect();
    let file = File::open(corpus).map_err(|e| Error::io(corpus, e))?;
    let mut reader = BufReader::new(file);
    let mut idiom = 0usize;
    let mut word_counts = vec![0usize; words.len()];
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf).map_err(|e| Error::io(corpus, e))?;
        if n == 0 {
            break;
        }
        let folded = text::fold(&String::from_utf8_lossy(&buf));
        idiom += forms.iter().map(|f| text::count_bounded(&folded, f)).sum::<usize>();
        for (count, w) in word_counts.iter_mut().zip(&words) {
            *count += text::count_bounded(&folded, w);
        }
    }
    if let Some(i) = word_counts.iter().position(|&c| c == 0) {
        return Err(Error::DivisionContext(entry.words()[i].to_string()));
    }
    let mean = word_counts.iter().sum::<usize>() as f64 / word_counts.len() as f64;
    Ok(idiom as f64 / mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::Language;
    use std::io::Write;

    fn pair(gold: f64, subset: Subset) -> StsPair {
        StsPair::new("a", "b", gold, Language::En, subset).unwrap()
    }

    #[test]
    fn exact_extremes() {
        let xs = [0.3, 1.5, -2.0, 9.0, 4.4];
        assert_eq!(spearman(&xs, &xs).unwrap(), 1.0);
        let rev: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert_eq!(spearman(&xs, &rev).unwrap(), -1.0);
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0, 20.0]), vec![1.5, 3.5, 1.5, 5.0, 3.5]);
    }

    #[test]
    fn error_cases() {
        assert!(matches!(spearman(&[1.0, 2.0], &[1.0]), Err(Error::LengthMismatch(2, 1))));
        assert!(matches!(spearman(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::UndefinedCorrelation)));
        assert!(matches!(spearman(&[1.0], &[1.0]), Err(Error::UndefinedCorrelation)));
    }

    #[test]
    fn general_only_report() {
        let pairs: Vec<StsPair> = [0.1, 0.5, 0.9, 0.3].iter().map(|&g| pair(g, Subset::General)).collect();
        let preds = [0.2, 0.4, 0.8, 0.5];
        let r = evaluate(&preds, &pairs).unwrap();
        assert_eq!(r.sr_idiom, None);
        assert_eq!(Some(r.sr_all), r.sr_sts);
        assert_eq!(r.language, "en");
        assert!(!r.to_json().contains("sr_idiom"));
        assert_eq!(r.table_row("Pre-Train"), "Pre-Train\ten\t0.8000\t-\t0.8000");
    }

    #[test]
    fn per_idiom_threshold() {
        let mut pairs = Vec::new();
        let mut idiom_of = BTreeMap::new();
        for i in 0..6 {
            idiom_of.insert(pairs.len(), "idiom_fish_story".to_string());
            pairs.push(pair(i as f64 / 10.0, Subset::Idiom));
        }
        for i in 0..4 {
            idiom_of.insert(pairs.len(), "idiom_swan_song".to_string());
            pairs.push(pair(i as f64 / 10.0, Subset::Idiom));
        }
        pairs.push(pair(0.5, Subset::General));
        let preds: Vec<f64> = pairs.iter().map(|p| p.gold_score * 2.0).collect();
        let out = per_idiom_analysis(&preds, &pairs, &idiom_of, 5).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out["idiom_fish_story"], IdiomScore { n: 6, sr: 1.0 });
        idiom_of.remove(&0);
        assert!(matches!(
            per_idiom_analysis(&preds, &pairs, &idiom_of, 5),
            Err(Error::MissingGrouping(0))
        ));
    }

    #[test]
    fn idiom_grouping_from_registry() {
        let mut reg = MweRegistry::new(Language::En);
        reg.register("fish story", Language::En, &[]).unwrap();
        reg.register("swan song", Language::En, &[]).unwrap();
        let pairs = vec![
            StsPair::new("his Swan Song", "a fish story", 0.5, Language::En, Subset::Idiom).unwrap(),
            StsPair::new("nothing", "a fish story", 0.5, Language::En, Subset::Idiom).unwrap(),
            StsPair::new("a swan song", "x", 0.5, Language::En, Subset::General).unwrap(),
        ];
        let m = idiom_of_pairs(&pairs, &reg);
        assert_eq!(m.len(), 2);
        assert_eq!(m[&0], "idiom_swan_song");
        assert_eq!(m[&1], "idiom_fish_story");
    }

    #[test]
    fn rarity_hand_counted_fixture() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        // idiom 2, swan 10 (incl. the 2 idiom uses), song 30 (incl. 2)
        writeln!(f, "A Swan Song and a swan song.").unwrap();
        for _ in 0..8 {
            writeln!(f, "the swan swims").unwrap();
        }
        for _ in 0..14 {
            writeln!(f, "song, SONG").unwrap();
        }
        writeln!(f, "swansong songs").unwrap();
        let mut reg = MweRegistry::new(Language::En);
        let e = reg.register("swan song", Language::En, &[]).unwrap();
        assert!((rarity_stats(f.path(), &e).unwrap() - 0.1).abs() < 1e-15);

        let mut g = tempfile::NamedTempFile::new().unwrap();
        writeln!(g, "swan song, swan song").unwrap();
        assert_eq!(rarity_stats(g.path(), &e).unwrap(), 1.0);

        let mut h = tempfile::NamedTempFile::new().unwrap();
        writeln!(h, "a swan").unwrap();
        assert!(matches!(rarity_stats(h.path(), &e), Err(Error::DivisionContext(w)) if w == "song"));
    }
}
