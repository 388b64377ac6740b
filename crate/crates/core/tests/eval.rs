mod common;

use std::collections::BTreeMap;

use mwe_core::eval::{evaluate, idiom_of_pairs, per_idiom_analysis, rarity_stats, EvalReport};
use mwe_core::sts::{StsPair, Subset};
use mwe_core::Language;

use common::{fixture, oracle_spearman, registry_of};

fn pair(a: &str, b: &str, gold: f64, subset: Subset) -> StsPair {
    StsPair::new(a, b, gold, Language::En, subset).unwrap()
}

#[test]
fn subsets_are_scored_separately() {
    let pairs = vec![
        pair("his swan song", "his last show", 0.9, Subset::Idiom),
        pair("a swan song", "a bird sang", 0.2, Subset::Idiom),
        pair("Swan song again", "a final act", 0.7, Subset::Idiom),
        pair("red tape everywhere", "paperwork everywhere", 0.8, Subset::Idiom),
        pair("the cat", "a dog", 0.3, Subset::General),
        pair("the cat sat", "a cat sat", 0.9, Subset::General),
        pair("rain", "sun", 0.1, Subset::General),
    ];
    let preds = [0.8, 0.1, 0.5, 0.4, 0.35, 0.95, 0.3];
    let report = evaluate(&preds, &pairs).unwrap();

    let gold: Vec<f64> = pairs.iter().map(|p| p.gold_score).collect();
    assert_eq!(report.sr_all, oracle_spearman(&preds, &gold).unwrap());
    assert!((report.sr_idiom.unwrap() - oracle_spearman(&preds[..4], &gold[..4]).unwrap()).abs() < 1e-12);
    assert!((report.sr_sts.unwrap() - oracle_spearman(&preds[4..], &gold[4..]).unwrap()).abs() < 1e-12);
    assert_eq!(report.language, "en");

    let registry = registry_of(&["swan song", "red tape"]);
    let grouping = idiom_of_pairs(&pairs, &registry);
    assert_eq!(grouping.len(), 4);
    assert_eq!(grouping[&3], "idiom_red_tape");
    let per = per_idiom_analysis(&preds, &pairs, &grouping, 3).unwrap();
    assert_eq!(per.keys().collect::<Vec<_>>(), vec!["idiom_swan_song"]);
    assert_eq!(per["idiom_swan_song"].n, 3);
    assert!((per["idiom_swan_song"].sr - 1.0).abs() < 1e-12);
}

#[test]
fn general_only_report_omits_idiom_split() {
    let pairs = vec![
        pair("a", "b", 0.1, Subset::General),
        pair("c", "d", 0.5, Subset::General),
        pair("e", "f", 0.9, Subset::General),
    ];
    let report = evaluate(&[0.3, 0.2, 0.9], &pairs).unwrap();
    assert_eq!(report.sr_idiom, None);
    assert!(!report.to_json().contains("sr_idiom"));
    assert_eq!(report.table_row("pre-train"), "pre-train\ten\t0.5000\t-\t0.5000");
    let back: EvalReport = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(back, report);
    assert!(per_idiom_analysis(&[0.3, 0.2, 0.9], &pairs, &BTreeMap::new(), 1).unwrap().is_empty());
}

#[test]
fn rarity_on_fixture_corpus() {
    // "red tape": 4 grep lines but only 3 word-bounded hits (line 9 is "red tapestry").
    // "red" is word-bounded on lines 6, 7, 8 (red-tape), 9 and 18; "tape" on 6, 7, 8 and 18.
    let registry = registry_of(&["red tape"]);
    let r = rarity_stats(&fixture("extraction/corpus.txt"), &registry.entries()[0]).unwrap();
    assert!((r - 3.0 / 4.5).abs() < 1e-12, "{r}");
}
