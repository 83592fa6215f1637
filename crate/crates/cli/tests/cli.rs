use std::path::Path;
use std::process::Command;

use boxattn::baselines::PriorMode;
use boxattn::data::synthetic::SyntheticConfig;
use boxattn::metrics::Protocol;
use boxattn::model::ModelConfig;
use boxattn::training::Schedule;
use boxattn_cli::{
    cmd_baseline, cmd_eval, cmd_gradcheck, cmd_predict, cmd_synth, cmd_train, predictions_path, RunConfig,
};

fn tiny(out: &Path) -> RunConfig {
    let schedule = Schedule {
        epochs: 2,
        batch_size: 4,
        ..Schedule::default()
    };
    RunConfig {
        seed: Some(3),
        out: out.to_path_buf(),
        test_images: 4,
        synth: SyntheticConfig {
            image_size: (32, 32),
            num_images: 8,
            ..SyntheticConfig::default()
        },
        model: ModelConfig {
            input_size: (32, 32),
            channels: vec![4, 8, 8],
            grid: (4, 4),
            ..ModelConfig::default()
        },
        detector_schedule: schedule.clone(),
        schedule,
        ..RunConfig::default()
    }
}

fn repo_file(rel: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

#[test]
fn shipped_config_is_the_default() {
    let cfg = RunConfig::load(&repo_file("configs/default.toml")).unwrap();
    assert_eq!(
        cfg,
        RunConfig {
            seed: Some(0),
            ..RunConfig::default()
        }
    );
    cfg.validate().unwrap();
}

#[test]
fn config_requires_seed_and_rejects_unknown_keys() {
    let cfg = RunConfig::from_toml("threads = 2\n").unwrap();
    assert!(cfg.validate().unwrap_err().to_string().contains("seed"));
    assert!(RunConfig::from_toml("seed = 1\nbogus = 3\n").is_err());
    assert!(RunConfig::from_toml("seed = 1\n[schedule]\nepochs = 0\n")
        .unwrap()
        .validate()
        .is_err());
}

#[test]
fn pipeline_smoke_and_thread_independence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    cmd_synth(&cfg).unwrap();
    let out = cmd_train(&cfg).unwrap();
    assert_eq!(
        out.trace.len(),
        std::fs::read_to_string(dir.path().join("trace.csv"))
            .unwrap()
            .lines()
            .count()
            - 1
    );
    assert!(dir.path().join("detector.ckpt").exists());

    let preds = cmd_predict(&cfg, None).unwrap();
    let single = std::fs::read(&preds).unwrap();
    let parallel = RunConfig {
        threads: 4,
        ..cfg.clone()
    };
    cmd_predict(&parallel, None).unwrap();
    assert_eq!(std::fs::read(&preds).unwrap(), single);

    let vrd = cmd_eval(&cfg, &preds, None, Protocol::Vrd).unwrap();
    let keys: Vec<&str> = vrd.entries.iter().map(|(k, _)| k.as_str()).collect();
    assert_eq!(keys, ["recall@50", "recall@100"]);
    let oid = cmd_eval(&cfg, &preds, None, Protocol::Oid).unwrap();
    for k in ["relationship_map", "phrase_map", "recall@50", "score"] {
        let v = oid.get(k).unwrap();
        assert!((0.0..=1.0).contains(&v), "{k} = {v}");
    }
    let vcoco = cmd_eval(&cfg, &preds, None, Protocol::Vcoco).unwrap();
    assert!(vcoco.get("mean_ap_role").is_some());
    assert!(dir.path().join("eval_predictions_oid.kv").exists());

    for mode in [PriorMode::Freq, PriorMode::FreqOverlap] {
        let path = cmd_baseline(&cfg, mode, None).unwrap();
        let report = cmd_eval(&cfg, &path, None, Protocol::Vrd).unwrap();
        assert!(report.get("recall@50").is_some());
        assert!(dir.path().join(format!("prior_{}.tsv", mode.name())).exists());
    }
}

#[test]
fn mismatched_vocabulary_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cmd_synth(&cfg).unwrap();
    cfg.model.num_predicates = 5;
    let err = cmd_train(&cfg).err().unwrap();
    assert!(format!("{err:#}").contains("predicates"), "{err:#}");
}

#[test]
fn missing_inputs_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    assert!(cmd_train(&cfg).is_err());
    assert!(cmd_predict(&cfg, None).is_err());
    assert!(cmd_eval(&cfg, &predictions_path(&cfg), None, Protocol::Vrd).is_err());
}

#[test]
fn gradcheck_command_passes() {
    let dir = tempfile::tempdir().unwrap();
    let checks = cmd_gradcheck(&tiny(dir.path())).unwrap();
    assert!(checks.iter().all(|c| c.passed() && c.worst < 1e-4));
    let text = std::fs::read_to_string(dir.path().join("gradcheck.txt")).unwrap();
    assert_eq!(text.lines().count(), checks.len() + 1);
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_boxattn"))
}

#[test]
fn binary_exit_status() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().arg("--help").output().unwrap();
    assert!(out.status.success());
    let help = String::from_utf8(out.stdout).unwrap();
    for cmd in ["synth", "train", "predict", "baseline", "eval", "gradcheck"] {
        assert!(help.contains(cmd), "{cmd} missing from --help");
    }

    // No seed anywhere.
    let out = bin().args(["--out"]).arg(dir.path()).arg("synth").output().unwrap();
    assert!(!out.status.success());

    // Flags override the file.
    let config = dir.path().join("run.toml");
    std::fs::write(&config, "seed = 1\ntest_images = 2\n[synth]\nnum_images = 3\n").unwrap();
    let out = bin()
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.path())
        .args(["--seed", "9", "synth", "--images", "2"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ann = boxattn::data::load_annotations(&dir.path().join("data/train/annotations.json")).unwrap();
    assert_eq!(ann.images.len(), 2);

    let out = bin()
        .arg("--out")
        .arg(dir.path())
        .args(["--seed", "1", "eval", "--protocol", "vrd"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
