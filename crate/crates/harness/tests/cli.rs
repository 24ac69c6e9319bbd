use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[dataset]
image_size = 16
train_per_class = 8
holdout_per_class = 4
swapped_per_class = 4
tag_fractions = [0.0, 1.0]
seed = 1

[model]
widths = [4, 4, 8]

[training]
learning_rate = 0.01
batch_size = 8
epochs = 2

[concepts]
positives = 8
negatives = 24

[explain]
layers = ["conv6", "conv4"]
ig_steps = 20

[tcav]
runs = 3

[checks]
completeness_images = 3
fine_steps = 40
heldout_examples = 4
gradcam_images = 2
overlays = 1
"#;

fn cavlens(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cavlens"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cavlens(args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{args:?}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pngs(dir: &Path) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count()
}

#[test]
fn help_and_version_exit_zero() {
    let out = ok(&["--help"]);
    for sub in [
        "generate-dataset",
        "train",
        "compute-cav",
        "explain-local",
        "explain-global",
        "tcav",
        "run-validation",
    ] {
        assert!(out.contains(sub), "help lacks {sub}");
    }
    assert!(ok(&["--version"]).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn usage_errors_exit_one() {
    for args in [
        &["frobnicate"][..],
        &["train", "--out", "x.ckpt"],
        &["train", "--fraction", "abc", "--out", "x.ckpt"],
        &["run-validation", "--config", "a.toml", "--preset", "desk"],
    ] {
        assert_eq!(cavlens(args).status.code(), Some(1), "{args:?}");
    }
}

#[test]
fn runtime_failures_exit_two_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    let cases: Vec<Vec<&str>> = vec![
        vec!["run-validation", "--preset", "enormous"],
        vec!["run-validation", "--config", s(&missing)],
        vec!["tcav", "--model", s(&missing), "--images", "x", "--class", "0", "--layer", "conv6", "--positives", "p", "--negatives", "n"],
        vec!["train", "--fraction", "0.3", "--out", s(&missing)],
    ];
    for args in &cases {
        let out = cavlens(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "), "{args:?}");
    }
}

#[test]
fn subcommands_work_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let data = root.join("data");

    ok(&["generate-dataset", "--config", s(&cfg), "--out", s(&data)]);
    for split in ["train-tag000", "train-tag100", "holdout", "swapped"] {
        assert!(data.join(split).join(cavlens::synthdata::MANIFEST_FILE).is_file(), "{split}");
    }
    assert_eq!(pngs(&data.join("concepts/taxi/positives")), 8);
    assert_eq!(pngs(&data.join("concepts-heldout/tag-T/negatives")), 4);
    assert!(data.join("hashes.json").is_file());

    let ckpt = root.join("models/m.ckpt");
    assert!(ok(&["train", "--config", s(&cfg), "--fraction", "0", "--out", s(&ckpt)]).contains("holdout accuracy"));

    let concepts = data.join("concepts");
    let mut cavs = Vec::new();
    for concept in ["taxi", "tag-Z"] {
        for layer in ["conv6", "conv4"] {
            let out = root.join(format!("{concept}@{layer}.cav"));
            let pos = concepts.join(concept).join("positives");
            let neg = concepts.join(concept).join("negatives");
            let msg = ok(&["compute-cav", "--model", s(&ckpt), "--layer", layer, "--positives", s(&pos), "--negatives", s(&neg), "--out", s(&out)]);
            assert!(msg.starts_with(&format!("{concept}@{layer}")), "{msg}");
            if !msg.contains("uncalibrated") {
                cavs.push(out);
            }
        }
    }
    assert!(!cavs.is_empty(), "no concept calibrated on the tiny model");
    let mut cav_args: Vec<&str> = Vec::new();
    for c in &cavs {
        cav_args.extend(["--cav", s(c)]);
    }

    let image = data.join("swapped/00000.png");
    let local = root.join("local");
    let mut args = vec!["explain-local", "--model", s(&ckpt), "--image", s(&image), "--top-k", "2", "--steps", "20", "--out", s(&local)];
    args.extend(&cav_args);
    ok(&args);
    let rows = csv::Reader::from_path(local.join("attributions.csv")).unwrap().records().count();
    assert_eq!(rows, cavs.len() * 2);
    assert_eq!(pngs(&local), cavs.len());

    let global = root.join("global");
    let swapped = data.join("swapped");
    let mut args = vec!["explain-global", "--model", s(&ckpt), "--images", s(&swapped), "--class", "taxi", "--steps", "10", "--out", s(&global)];
    args.extend(&cav_args);
    ok(&args);
    assert!(global.join("global_attributions.csv").is_file());
    assert!(std::fs::read_dir(&global).unwrap().any(|e| e.unwrap().path().extension().is_some_and(|x| x == "svg")));

    let tcav_json = root.join("tcav.json");
    let msg = ok(&[
        "tcav", "--model", s(&ckpt), "--images", s(&swapped), "--class", "1", "--layer", "conv6",
        "--positives", s(&concepts.join("taxi/positives")), "--negatives", s(&concepts.join("taxi/negatives")),
        "--runs", "3", "--out", s(&tcav_json),
    ]);
    assert!(msg.starts_with("taxi -> taxi at conv6: score"), "{msg}");
    let result: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&tcav_json).unwrap()).unwrap();
    assert_eq!(result["concept_scores"].as_array().unwrap().len(), 3);

    let run = root.join("run");
    ok(&["run-validation", "--config", s(&cfg), "--out", s(&run)]);
    for f in ["report.json", "timings.json", "tables/accuracy.csv", "tables/tcav.csv", "charts/accuracy_vs_fraction.svg", "charts/tcav_scores.png"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    assert_eq!(std::fs::read_dir(run.join("models")).unwrap().count(), 2);
}
