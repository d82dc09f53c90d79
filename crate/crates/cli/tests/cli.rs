use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_zoomloc");

/// A cohort and schedules small enough for a few seconds of training.
const TINY: &str = r#"{
  "synth": {"train_patients": [2, 2, 2, 2], "test_patients": [1, 1, 1, 1]},
  "pretext": {"count": 200},
  "train": {
    "pretext": {"max_epochs": 1},
    "downstream": {"stage1": [[1, 0.001]], "stage2_epochs": 1}
  },
  "eval": {"ablation": {"variants": ["location-ssl", "random-init"], "fractions": [0.5, 1.0], "runs": 2}}
}"#;

fn run(args: &[&str], out: &Path, config: Option<&Path>) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args).arg("--out").arg(out).env("RUST_LOG", "warn");
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.output().unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "{:?}\n{}", o.status, String::from_utf8_lossy(&o.stderr));
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("tiny.json");
    std::fs::write(&p, TINY).unwrap();
    p
}

#[test]
fn verify_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["verify"], dir.path(), None);
    ok(&o);
    assert!(dir.path().join("verify/verify.json").exists());
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"synth": {"levles": 4}}"#).unwrap();
    assert_eq!(run(&["gen-synth"], dir.path(), Some(&bad)).status.code(), Some(1));
    std::fs::write(&bad, r#"{"downstream": {"label_fraction": 0}}"#).unwrap();
    assert_eq!(run(&["gen-synth"], dir.path(), Some(&bad)).status.code(), Some(1));
    assert_eq!(run(&["gen-synth", "--bogus"], dir.path(), None).status.code(), Some(1));
    assert_eq!(run(&["gen-synth"], dir.path(), Some(&dir.path().join("missing.json"))).status.code(), Some(1));
}

#[test]
fn missing_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["gen-pretext"], dir.path(), None).status.code(), Some(2));
    assert_eq!(run(&["evaluate"], dir.path(), None).status.code(), Some(2));
}

#[test]
fn defaults_print_and_reparse() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(BIN).args(["--print-defaults", "--seed", "3"]).output().unwrap();
    ok(&o);
    let cfg = zoomloc::config::Config::from_json(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(cfg.seed, 3);
    assert_eq!(cfg.synth.seed, 3);
    cfg.validate().unwrap();
    let p = Command::new(BIN).args(["--print-defaults", "--profile", "full"]).output().unwrap();
    ok(&p);
    let full = zoomloc::config::Config::from_json(&String::from_utf8(p.stdout).unwrap()).unwrap();
    assert_eq!(full.pretext.sampler.input_size, 112);
    drop(dir);
}

#[test]
fn help_lists_config_keys() {
    for (cmd, key) in [
        ("gen-synth", "synth.levels"),
        ("gen-pretext", "pretext.sampler.level_probs"),
        ("train-pretext", "train.pretext.actions"),
        ("train-downstream", "train.downstream.peak_lr"),
        ("evaluate", "downstream.tiles.tile"),
        ("ablate", "eval.ablation.fractions"),
        ("verify", "pretext.sampler.n"),
    ] {
        let o = Command::new(BIN).args([cmd, "--help"]).output().unwrap();
        ok(&o);
        let text = String::from_utf8(o.stdout).unwrap();
        assert!(text.contains(key), "{cmd} --help lacks {key}");
    }
}

#[test]
fn gen_pretext_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&run(&["gen-synth", "--seed", "7"], out, Some(&cfg)));
        ok(&run(&["gen-pretext", "--seed", "7"], out, Some(&cfg)));
    }
    for f in ["train.pssl", "val.pssl", "dataset.json"] {
        let x = std::fs::read(a.join("pretext-location").join(f)).unwrap();
        assert_eq!(x, std::fs::read(b.join("pretext-location").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn tiny_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    for step in [
        &["gen-synth"][..],
        &["gen-pretext"],
        &["train-pretext"],
        &["train-downstream", "--label-fraction", "0.5"],
        &["evaluate"],
        &["ablate"],
    ] {
        ok(&run(step, &out, Some(&cfg)));
    }
    for f in [
        "cohort/cohort.json",
        "pretext-model-location/weights.bin",
        "pretext-model-location/train_log.csv",
        "downstream-model/model.json",
        "evaluation/predictions.csv",
        "ablation/ablation.csv",
        "ablation/summary.json",
        "ablation/curve.svg",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let preds = std::fs::read_to_string(out.join("evaluation/predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 1 + 4);
    let abl = std::fs::read_to_string(out.join("ablation/ablation.csv")).unwrap();
    assert_eq!(abl.lines().next(), Some("variant,fraction,run,mean_acc"));
    assert_eq!(abl.lines().count(), 1 + 2 * 2 * 2);

    // pair-ssl was never trained, so its default encoder directory is missing
    let pair = dir.path().join("pair.json");
    std::fs::write(&pair, TINY.replace("\"location-ssl\", \"random-init\"", "\"pair-ssl\"")).unwrap();
    assert_eq!(run(&["ablate"], &out, Some(&pair)).status.code(), Some(2));
}
