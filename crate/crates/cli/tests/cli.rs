//! End-to-end behavior of the `plasma-views` binary.

use std::path::Path;
use std::process::{Command, Output};

use plasma_views_cli::exit;

const TINY: &str = r#"
seed = 3
[synth]
shots_per_machine = 8
disruptive_fraction = 0.5
[viewmaker.train]
steps = 3
batch_pairs = 2
[classifier.train]
steps = 4
batch_size = 8
[compare_dtw]
samples = 6
"#;

fn bin(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plasma-views"))
        .arg("--out-dir")
        .arg(root)
        .args(args)
        .env_remove("PLASMA_VIEWS_OUT")
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p.to_string_lossy().into_owned()
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(bin(&a, &["--seed", "9", "synth", "--shots", "4"]));
    ok(bin(&b, &["--seed", "9", "--threads", "3", "synth", "--shots", "4"]));
    let files = plasma_views_cli::manifest::list_files(&a.join("corpus")).unwrap();
    assert!(!files.is_empty());
    for f in files {
        let rel = f.strip_prefix(&a).unwrap();
        assert_eq!(read(&f), read(&b.join(rel)), "{}", rel.display());
    }
}

#[test]
fn missing_input_names_the_producing_command() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(dir.path(), &["preprocess"]);
    assert_eq!(out.status.code(), Some(exit::MISSING_INPUT));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("synth"), "{err}");

    let out = bin(dir.path(), &["train-classifier"]);
    assert_eq!(out.status.code(), Some(exit::MISSING_INPUT));
}

#[test]
fn bad_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[synth]\nshots_per_machine = 4\nbogus = 1\n").unwrap();
    let out = bin(dir.path(), &["--config", cfg.to_str().unwrap(), "synth"]);
    assert_eq!(out.status.code(), Some(exit::CONFIG));
    let out = bin(dir.path(), &["--threads", "0", "synth"]);
    assert_eq!(out.status.code(), Some(exit::CONFIG));
}

#[test]
fn external_scores_missing_shots_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("run");
    let cfg = tiny_config(dir.path());
    ok(bin(&root, &["--config", &cfg, "synth"]));
    ok(bin(&root, &["--config", &cfg, "preprocess"]));
    let test = plasma_views::pipeline::read_corpus(&root.join("corpus").join("test")).unwrap();
    assert!(test.len() >= 2);

    // scores for the first shot only
    let first = &test[0];
    let mut csv = String::from("shot,time_ms,score\n");
    for k in 0..first.len() {
        csv.push_str(&format!("{},{},0.1\n", first.id, first.time_of(k)));
    }
    let scores = dir.path().join("scores.csv");
    std::fs::write(&scores, csv).unwrap();
    let out = bin(&root, &["--config", &cfg, "evaluate", "--scores", scores.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    for d in &test[1..] {
        assert!(err.contains(&d.id), "{} not named in: {err}", d.id);
    }
    assert!(!err.contains(&format!("{},", first.id)));
}

#[test]
fn pipeline_report_and_manifest_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let cfg = tiny_config(dir.path());
    let stdout = ok(bin(&first, &["--config", &cfg, "run"]));
    let manifest = stdout
        .lines()
        .find_map(|l| l.strip_prefix("manifest: "))
        .expect("manifest path printed")
        .to_string();
    assert!(manifest.ends_with("0001-run.json"));

    // F2 in the table agrees with its own precision and recall
    let table = String::from_utf8(read(&first.join("report").join("table.csv"))).unwrap();
    let mut rows = 0;
    for line in table.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let (recall, precision, f2): (f64, f64, f64) =
            (cols[4].parse().unwrap(), cols[5].parse().unwrap(), cols[6].parse().unwrap());
        let want = if 4.0 * precision + recall == 0.0 {
            0.0
        } else {
            5.0 * precision * recall / (4.0 * precision + recall)
        };
        assert!((f2 - want).abs() <= 1e-9, "{line}");
        rows += 1;
    }
    assert_eq!(rows, 3);

    // rerun from the manifest reproduces every artifact it lists
    let second = dir.path().join("second");
    ok(bin(&second, &["--config", &manifest, "run"]));
    let m = plasma_views_cli::manifest::Manifest::load(Path::new(&manifest)).unwrap();
    assert!(!m.artifacts.is_empty());
    for a in &m.artifacts {
        let digest = plasma_views_cli::manifest::sha256_file(&second.join(&a.path)).unwrap();
        assert_eq!(digest, a.sha256, "{}", a.path);
    }

    // a second command in the same root gets the next manifest number
    let again = ok(bin(&first, &["--config", &cfg, "report"]));
    assert!(again.contains("0002-report.json"), "{again}");
}

#[test]
fn show_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let shown = ok(bin(dir.path(), &["--config", &cfg, "--seed", "17", "show-config"]));
    let again = dir.path().join("shown.toml");
    std::fs::write(&again, &shown).unwrap();
    assert_eq!(ok(bin(dir.path(), &["--config", again.to_str().unwrap(), "show-config"])), shown);
    assert!(shown.contains("seed = 17"));
    assert!(!dir.path().join("manifests").exists());
}
