use std::path::Path;
use std::process::{Command, Output};

use phenocompose::manifest::{RunManifest, MANIFEST_FILE};

fn cli(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phenocompose"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = cli(args, dir);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn prepare(dir: &Path) {
    std::fs::write(dir.join("train.toml"), "seed = 2\nmax_steps = 10\nbatch_size = 8\n[model]\npreset = \"tiny\"\n").unwrap();
    ok(&["gen-synthetic", "--notes", "40", "--seed", "4", "--out", "syn"], dir);
    ok(&["build-corpus", "--ontology", "syn/ontology.obo", "--corpus", "syn/notes.jsonl", "--out", "corpus"], dir);
    ok(&["train", "--config", "train.toml", "--ontology", "syn/ontology.obo", "--corpus", "corpus", "--out", "model"], dir);
    ok(&["calibrate", "--checkpoint", "model/checkpoint.safetensors", "--corpus", "corpus", "--out", "cal"], dir);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli(&[], dir.path()).status.code(), Some(2));
    assert_eq!(cli(&["annotate", "--bogus"], dir.path()).status.code(), Some(2));
    assert_eq!(cli(&["calibrate", "--checkpoint", "x"], dir.path()).status.code(), Some(2));
}

#[test]
fn annotate_without_checkpoint_names_the_artifact() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("notes.jsonl"), "").unwrap();
    let out = cli(&["annotate", "--thresholds", "t.tsv", "--corpus", "notes.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
    let out = cli(&["annotate", "--checkpoint", "missing.safetensors", "--thresholds", "t.tsv", "--corpus", "notes.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.safetensors"));
}

#[test]
fn out_of_range_percentile_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&["calibrate", "--checkpoint", "m", "--corpus", "c", "--percentile", "50"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("50"));
}

#[test]
fn full_pipeline_writes_artifacts_and_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir);
    ok(
        &[
            "annotate", "--checkpoint", "model/checkpoint.safetensors", "--thresholds", "cal/thresholds.tsv", "--corpus",
            "corpus", "--keep-alpha", "--workers", "2", "--out", "ann",
        ],
        dir,
    );
    ok(
        &[
            "build-silver", "--ontology", "syn/ontology.obo", "--corpus", "corpus", "--mapping-icd-omim", "syn/icd_omim.tsv",
            "--mapping-omim-hpo", "syn/omim_hpo.tsv", "--out", "silver",
        ],
        dir,
    );
    let summary = ok(&["evaluate", "--predictions", "ann/annotations.jsonl", "--silver", "silver/silver.jsonl", "--out", "eval"], dir);
    assert!(summary.contains("mean over documents"));
    ok(&["evaluate", "--predictions", "silver/keyword.jsonl", "--silver", "syn/truth.jsonl", "--ontology", "syn/ontology.obo", "--out", "kw"], dir);
    ok(&["stats", "--ontology", "syn/ontology.obo", "--corpus", "corpus", "--out", "stats"], dir);
    ok(&["parse-ontology", "--ontology", "syn/ontology.obo", "--out", "onto"], dir);

    let log = std::fs::read_to_string(dir.join("model/loss_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 11);
    assert!(log.starts_with("step\tehr\tcategory\tsubclass\tprior\ttotal"));
    let thresholds = std::fs::read_to_string(dir.join("cal/thresholds.tsv")).unwrap();
    assert!(thresholds.starts_with("#percentile\t90\n#calibration_hash\t"));
    let alpha = std::fs::read_to_string(dir.join("ann/alpha.tsv")).unwrap();
    assert!(alpha.starts_with("doc_id\tposition\t"));
    assert!(std::fs::read_to_string(dir.join("eval/report.tsv")).unwrap().contains("#mean"));

    for (run, command) in [
        ("syn", "gen-synthetic"),
        ("corpus", "build-corpus"),
        ("model", "train"),
        ("cal", "calibrate"),
        ("ann", "annotate"),
        ("silver", "build-silver"),
        ("eval", "evaluate"),
        ("stats", "stats"),
        ("onto", "parse-ontology"),
    ] {
        let m = RunManifest::read(&dir.join(run).join(MANIFEST_FILE)).unwrap();
        assert_eq!(m.command, command);
        for a in &m.artifacts {
            assert!(dir.join(run).join(a).exists(), "{run}/{a}");
        }
    }
    let m = RunManifest::read(&dir.join("ann").join(MANIFEST_FILE)).unwrap();
    assert!(m.inputs.contains_key("checkpoint") && m.inputs.contains_key("thresholds"));
}

#[test]
fn default_run_directory_follows_the_manifest_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(&["gen-synthetic", "--notes", "10", "--seed", "1"], dir);
    ok(&["gen-synthetic", "--notes", "10", "--seed", "1"], dir);
    ok(&["gen-synthetic", "--notes", "10", "--seed", "2"], dir);
    let runs: Vec<_> = std::fs::read_dir(dir.join("runs")).unwrap().collect();
    assert_eq!(runs.len(), 2);
}
