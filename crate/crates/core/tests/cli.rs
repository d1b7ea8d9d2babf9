use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn petsynth(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_petsynth")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(cwd: &Path, subjects: &str, shape: &str) {
    let o = petsynth(&["synth-data", "--out", "data", "--subjects", subjects, "--shape", shape, "--seed", "1"], cwd);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = petsynth(&["split", "--manifest", "m.csv", "--bogus"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[usage]"), "{}", stderr(&o));
    let o = petsynth(&["no-such-command"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn evaluate_without_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = petsynth(&["evaluate", "--manifest", "m.csv", "--out", "eval"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.starts_with("error[data]") && err.contains("missing checkpoint"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn missing_manifest_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = petsynth(&["split", "--manifest", "absent.csv"], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn sharegan_rejects_a_classification_weight() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "3", "16");
    let o = petsynth(
        &["train", "--manifest", "data/manifest.csv", "--model", "sharegan", "--lambda-cls", "0.1", "--epochs", "1"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("lambda_cls"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "3", "32");
    fs::write(dir.path().join("cfg.toml"), "model = \"pix2pix\"\nepochs = 7\nlearning_rate = 0.001\n").unwrap();
    let o = petsynth(
        &["train", "--manifest", "data/manifest.csv", "--config", "cfg.toml", "--epochs", "3", "--max-steps", "1", "--run-dir", "run"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("model = \"pix2pix\""), "{out}");
    assert!(out.contains("epochs = 3"), "{out}");
    assert!(out.contains("learning_rate = 0.001"), "{out}");
    fs::write(dir.path().join("bad.toml"), "modle = \"pix2pix\"\n").unwrap();
    let o = petsynth(&["train", "--manifest", "data/manifest.csv", "--config", "bad.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn split_is_reproducible_and_echoed() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "8", "16");
    let run = |out: &str| {
        let o = petsynth(&["split", "--manifest", "data/manifest.csv", "--seed", "4", "--out", out], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).contains("resolved split"));
        fs::read(dir.path().join(out)).unwrap()
    };
    assert_eq!(run("a.csv"), run("b.csv"));
}

#[test]
fn synth_then_train_one_epoch_writes_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "6", "64");
    let o = petsynth(
        &["train", "--manifest", "data/manifest.csv", "--model", "cyclegan", "--cond", "latent_concat", "--epochs", "1"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let runs: Vec<_> = fs::read_dir(dir.path().join("runs")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(runs.len(), 1);
    let ckpt = runs[0].join("final.ckpt");
    assert!(ckpt.is_file());
    assert!(runs[0].join("losses.csv").is_file());

    let o = petsynth(
        &[
            "generate",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--mri",
            "data/volumes/sub-000_0_mri.xvol",
            "--abeta",
            "0.08",
            "--out",
            "gen.xvol",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let generated = petsynth::io::read_volume(&dir.path().join("gen.xvol")).unwrap();
    assert_eq!(generated.shape(), [64; 3]);
}
