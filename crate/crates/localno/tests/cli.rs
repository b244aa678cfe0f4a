//! End-to-end checks of the command-line interface through the real binary.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_localno"))
}

fn train_config(dir: &Path, epochs: usize) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "model": {
            "in_channels": 1, "out_channels": 1, "width": 4,
            "append_coords": true, "activation": "gelu",
            "blocks": [{
                "spectral": true, "differential": true, "local_integral": false,
                "pointwise": true, "modes": [4, 4], "diff_size": 3,
                "padding": "reflective", "basis": null, "scale_override": null
            }]
        },
        "train": {"learning_rate": 1e-3, "decay_factor": 0.5, "decay_interval": 10,
                  "epochs": epochs, "batch_size": 4, "seed": 3},
        "init_seed": 1
    });
    let path = dir.join("train.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn gen_writes_the_requested_sample_count() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    let status = bin()
        .args(["gen", "--task", "darcy", "--grid", "16", "--count", "8", "--seed", "5"])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let ds = localno::data::Dataset::load(&out.join("dataset.bin")).unwrap();
    assert_eq!(ds.len(), 8);
    assert!(out.join("config.json").exists());
}

#[test]
fn missing_out_is_a_usage_error() {
    let status = bin()
        .args(["gen", "--task", "darcy"])
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(2));
}

#[test]
fn invalid_thread_cap_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let status = bin()
        .env("LOCALNO_THREADS", "zero")
        .args(["verify", "--suite", "collapse"])
        .arg("--out")
        .arg(tmp.path())
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(2));
}

#[test]
fn zero_epoch_training_writes_the_initial_model() {
    let tmp = tempfile::tempdir().unwrap();
    let data_dir = tmp.path().join("d");
    assert!(bin()
        .args(["gen", "--task", "darcy", "--grid", "16", "--count", "4", "--seed", "0"])
        .arg("--out")
        .arg(&data_dir)
        .status()
        .unwrap()
        .success());
    let cfg = train_config(tmp.path(), 0);
    let run = tmp.path().join("run");
    assert!(bin()
        .args(["train"])
        .arg("--config")
        .arg(&cfg)
        .arg("--data")
        .arg(data_dir.join("dataset.bin"))
        .arg("--out")
        .arg(&run)
        .status()
        .unwrap()
        .success());
    let model = localno::model::load_checkpoint(&run.join("checkpoint.bin")).unwrap();
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let file: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    let mc: localno::model::ModelConfig = serde_json::from_value(file["model"].clone()).unwrap();
    let fresh = localno::model::LocalNOModel::init(mc, 2, &mut rng).unwrap();
    assert_eq!(
        localno::model::params_to_vec(&model),
        localno::model::params_to_vec(&fresh)
    );
}

#[test]
fn training_and_eval_are_deterministic_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let data_dir = tmp.path().join("d");
    assert!(bin()
        .args(["gen", "--task", "darcy", "--grid", "16", "--count", "8", "--seed", "2"])
        .arg("--out")
        .arg(&data_dir)
        .status()
        .unwrap()
        .success());
    let cfg = train_config(tmp.path(), 2);
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let run = tmp.path().join(name);
        assert!(bin()
            .arg("train")
            .arg("--config")
            .arg(&cfg)
            .arg("--data")
            .arg(data_dir.join("dataset.bin"))
            .arg("--out")
            .arg(&run)
            .status()
            .unwrap()
            .success());
        outputs.push((
            std::fs::read(run.join("checkpoint.bin")).unwrap(),
            std::fs::read_to_string(run.join("metrics.csv")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);

    let out = bin()
        .arg("eval")
        .arg("--checkpoint")
        .arg(tmp.path().join("a/checkpoint.bin"))
        .arg("--data")
        .arg(data_dir.join("dataset.bin"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("relative_l2 "), "{text}");
}

#[test]
fn verify_collapse_passes_and_writes_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["verify", "--suite", "collapse"])
        .arg("--out")
        .arg(tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");
    let csv = std::fs::read_to_string(tmp.path().join("verify_collapse.csv")).unwrap();
    assert!(csv.starts_with("resolution,max_norm_distance\n"));
}
