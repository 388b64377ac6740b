use std::fs;
use std::path::Path;

use mwe_core::encoder::EncoderConfig;
use mwe_core::mlm::MlmConfig;
use mwe_core::pipeline::{
    run_pipeline, run_pipeline_with_manifest, sweep_contexts, sweep_epochs, PipelineConfig, Setting, REPORT_FILE,
};
use mwe_core::sts::{load_sts_tsv, write_sts_tsv, ScoreScale};
use mwe_core::synth::{SynthConfig, SynthHarness, ToyRun};
use mwe_core::Error;

fn small_harness(seed: u64) -> SynthHarness {
    SynthHarness::generate(SynthConfig {
        topics: 6,
        sentences: 500,
        idioms: 4,
        idiom_occurrences: 15,
        general_train_pairs: 60,
        general_eval_pairs: 30,
        idiom_train_pairs_per_idiom: 3,
        idiom_eval_pairs_per_idiom: 6,
        encoder: EncoderConfig {
            d_model: 16,
            n_layers: 1,
            d_ff: 32,
            max_len: 16,
            init_std: 0.1,
        },
        mlm: MlmConfig {
            epochs: 2,
            ..MlmConfig::default()
        },
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn small_run() -> ToyRun {
    let mut toy = ToyRun {
        contexts_per_idiom: 5,
        pretrain_epochs: 2,
        ..ToyRun::default()
    };
    toy.mimic.gold_min_frequency = 5;
    toy.mimic.max_gold_words = Some(12);
    toy.mimic.contexts_per_word = 4;
    toy
}

fn small_config(dir: &Path, seed: u64) -> PipelineConfig {
    let mut c = small_harness(seed).prepare_run(dir, &small_run()).unwrap();
    c.mimic_schedule.context_epochs = 1;
    c.mimic_schedule.form_epochs = 2;
    c.mimic_schedule.combined_epochs = 1;
    c
}

#[test]
fn identical_inputs_give_identical_reports() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = small_config(a.path(), 3);
    let cb = small_config(b.path(), 3);
    run_pipeline(&ca, Setting::Pretrain).unwrap();
    run_pipeline(&cb, Setting::Pretrain).unwrap();
    let ra = fs::read(ca.output_dir.join(REPORT_FILE)).unwrap();
    let rb = fs::read(cb.output_dir.join(REPORT_FILE)).unwrap();
    assert_eq!(ra, rb);
}

#[test]
fn rerun_hits_the_cache_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), 1);
    let first = run_pipeline_with_manifest(&config, Setting::Finetune).unwrap();
    assert_eq!(first.manifest.hits(), 0);
    let second = run_pipeline_with_manifest(&config, Setting::Finetune).unwrap();
    assert!(second.manifest.artifacts.values().all(|a| a.cache_hit));
    assert_eq!(second.manifest.artifacts.len(), first.manifest.artifacts.len());
    assert_eq!(first.report, second.report);
    for (label, a) in &first.manifest.artifacts {
        assert_eq!(a.sha256, second.manifest.artifacts[label].sha256, "{label}");
    }
}

#[test]
fn tampered_artifact_is_rebuilt() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), 1);
    let first = run_pipeline_with_manifest(&config, Setting::Pretrain).unwrap();
    let cache = config.cache_dir();
    let bundle = first.manifest.artifacts.values().find(|a| a.stage == "embed").unwrap();
    let victim = cache.join(&bundle.path).join("bundle/vectors.f32");
    let mut bytes = fs::read(&victim).unwrap();
    bytes[0] ^= 0xff;
    fs::write(&victim, bytes).unwrap();

    let second = run_pipeline_with_manifest(&config, Setting::Pretrain).unwrap();
    let rebuilt = second.manifest.artifacts.values().find(|a| a.stage == "embed").unwrap();
    assert!(!rebuilt.cache_hit);
    assert_eq!(rebuilt.sha256, bundle.sha256);
    assert_eq!(first.report, second.report);
}

#[test]
fn idiom_pairs_in_pretrain_data_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config(dir.path(), 2);
    let mut pairs = load_sts_tsv(&config.sts_train_path, ScoreScale::Unit).unwrap();
    pairs.extend(load_sts_tsv(config.sts_finetune_path.as_ref().unwrap(), ScoreScale::Unit).unwrap());
    let mixed = dir.path().join("mixed.tsv");
    write_sts_tsv(&mixed, &pairs).unwrap();
    config.sts_train_path = mixed;
    match run_pipeline(&config, Setting::Pretrain) {
        Err(Error::Stage { stage, source }) => {
            assert_eq!(stage, "train");
            assert!(matches!(*source, Error::SettingViolation(n) if n == 12));
        }
        other => panic!("expected a setting violation, got {other:?}"),
    }
}

#[test]
fn finetune_requires_idiom_training_data() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config(dir.path(), 2);
    config.sts_finetune_path = None;
    assert!(run_pipeline(&config, Setting::Finetune).is_err());
    assert!(run_pipeline(&config, Setting::Pretrain).is_ok());
}

#[test]
fn zero_finetune_epochs_reproduce_the_pretrain_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), 4);
    let pretrain = run_pipeline(&config, Setting::Pretrain).unwrap();
    let sweep = sweep_epochs(&config, Setting::Finetune, &[0]).unwrap();
    assert_eq!(sweep.len(), 1);
    assert_eq!(sweep[&0], pretrain);
    assert!(config.output_dir.join("sweep_epochs_finetune.tsv").exists());
}

#[test]
fn single_point_context_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), 5);
    let sweep = sweep_contexts(&config, &[1]).unwrap();
    assert_eq!(sweep.keys().copied().collect::<Vec<_>>(), vec![1]);
    let tsv = fs::read_to_string(config.output_dir.join("sweep_contexts.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 2);
    assert!(sweep_contexts(&config, &[]).is_err());
    assert!(sweep_contexts(&config, &[0]).is_err());
}

#[test]
fn config_roundtrips_through_json() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), 6);
    let path = dir.path().join("config.json");
    config.save(&path).unwrap();
    assert_eq!(PipelineConfig::load(&path).unwrap(), config);

    let mut bad = config.clone();
    bad.contexts_per_idiom = bad.max_matches + 1;
    assert!(matches!(
        run_pipeline(&bad, Setting::Pretrain),
        Err(Error::Stage { ref stage, .. }) if stage == "config"
    ));
}

/// Frozen output of the small harness at seed 7. A change here means the
/// numerics of some stage changed.
#[test]
fn small_harness_golden_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), 7);
    let report = run_pipeline(&config, Setting::Finetune).unwrap();
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/pipeline/small_finetune_report.json");
    if std::env::var_os("MWE_BLESS").is_some() {
        fs::create_dir_all(golden.parent().unwrap()).unwrap();
        fs::write(&golden, report.to_json()).unwrap();
    }
    let want: serde_json::Value = serde_json::from_str(&fs::read_to_string(&golden).unwrap()).unwrap();
    let got: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    assert_close(&got, &want, "");
}

fn assert_close(got: &serde_json::Value, want: &serde_json::Value, at: &str) {
    use serde_json::Value;
    match (got, want) {
        (Value::Number(g), Value::Number(w)) => {
            let (g, w) = (g.as_f64().unwrap(), w.as_f64().unwrap());
            assert!((g - w).abs() <= 1e-9, "{at}: {g} vs {w}");
        }
        (Value::Object(g), Value::Object(w)) => {
            assert_eq!(g.keys().collect::<Vec<_>>(), w.keys().collect::<Vec<_>>(), "{at}");
            for (k, v) in w {
                assert_close(&g[k], v, &format!("{at}.{k}"));
            }
        }
        _ => assert_eq!(got, want, "{at}"),
    }
}
