use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mwe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mwe")).args(args).output().unwrap()
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/extraction")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn mine_sample_annotate_curate() {
    let dir = tempfile::tempdir().unwrap();
    let registry = dir.path().join("registry.json");
    fs::write(
        &registry,
        r#"[{"surface": "swan song", "language": "en", "variants": [], "token_name": "idiom_swan_song"},
            {"surface": "red tape", "language": "en", "variants": [], "token_name": "idiom_red_tape"}]"#,
    )
    .unwrap();
    let corpus = fixtures().join("corpus.txt");
    let mined = dir.path().join("mined");

    let out = mwe(&["mine", "--corpus", s(&corpus), "--registry", s(&registry), "--out-dir", s(&mined)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout), "idiom_swan_song\t5\nidiom_red_tape\t4\n");
    let swan = mined.join("idiom_swan_song.jsonl");
    assert_eq!(
        fs::read_to_string(&swan).unwrap(),
        fs::read_to_string(fixtures().join("idiom_swan_song.golden.jsonl")).unwrap()
    );

    let sampled = dir.path().join("sampled.jsonl");
    let out = mwe(&["sample", "--contexts", s(&swan), "--k", "3", "--seed", "4", "--out", s(&sampled)]);
    assert!(out.status.success());
    assert_eq!(fs::read_to_string(&sampled).unwrap().lines().count(), 3);

    let template = dir.path().join("template.jsonl");
    assert!(mwe(&["annotate", "--contexts", s(&swan), "--out", s(&template)]).status.success());
    let edited = fs::read_to_string(&template).unwrap().replacen("unreviewed", "misuse", 1);
    fs::write(&template, edited).unwrap();
    let curated = dir.path().join("curated.jsonl");
    let out = mwe(&[
        "curate",
        "--contexts",
        s(&swan),
        "--annotations",
        s(&template),
        "--out",
        s(&curated),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(&curated).unwrap().lines().count(), 4);
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.txt");
    let registry = dir.path().join("registry.json");
    fs::write(&registry, r#"[{"surface": "swan", "language": "en", "variants": [], "token_name": "idiom_swan"}]"#).unwrap();
    let out = mwe(&["mine", "--corpus", s(&missing), "--registry", s(&registry), "--out-dir", s(dir.path())]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error:"), "{stderr}");
    assert!(stderr.contains("swan"), "{stderr}");
}
