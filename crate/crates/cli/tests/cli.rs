//! End-to-end tests for the command-line interface.
//!
//! Most tests call [`clip2scene_cli::run`] in process; the thread-cap tests
//! spawn the real binary so the environment variable can be set per child
//! process without racing other tests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use clip2scene_cli::{run, EXIT_FAILURE, EXIT_OK, EXIT_USAGE};

fn run_args(args: &[&str]) -> i32 {
    let mut argv = vec!["clip2scene"];
    argv.extend_from_slice(args);
    run(argv)
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let data_dir = dir.join("data");
    let text = format!(
        "scene.seed = 3\n\
         scene.count = 3\n\
         scene.classes = 3\n\
         scene.feature_dim = 8\n\
         scene.width = 24\n\
         scene.height = 24\n\
         scene.sweeps = 2\n\
         scene.points_per_sweep = 90\n\
         data.dir = {}\n\
         train.epochs = 2\n\
         train.switch_epoch = 1\n\
         train.hidden = 10\n\
         train.max_pairs = 120\n\
         probe.fraction = 0.1\n\
         probe.epochs = 3\n\
         {extra}\n",
        data_dir.display()
    );
    let path = dir.join("cfg.txt");
    fs::write(&path, text).unwrap();
    path
}

/// All regular files under `root`, keyed by relative path.
fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn bad_usage_exits_2() {
    assert_eq!(run_args(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(run_args(&[]), EXIT_USAGE);
    assert_eq!(run_args(&["gen"]), EXIT_USAGE); // missing --config/--out
    assert_eq!(run_args(&["gen", "--config"]), EXIT_USAGE); // dangling value
}

#[test]
fn help_and_version_exit_0() {
    assert_eq!(run_args(&["--help"]), EXIT_OK);
    assert_eq!(run_args(&["--version"]), EXIT_OK);
    assert_eq!(run_args(&["gen", "--help"]), EXIT_OK);
}

#[test]
fn gen_is_deterministic_and_seed_sensitive() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let cfg = cfg.to_str().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    for (dir, seed) in [(&a, None), (&b, None), (&c, Some("9"))] {
        let mut args = vec!["gen", "--config", cfg, "--out", dir.to_str().unwrap(), "--quiet"];
        if let Some(s) = seed {
            args.extend_from_slice(&["--seed", s]);
        }
        assert_eq!(run_args(&args), EXIT_OK);
    }
    let snap_a = snapshot(&a);
    assert_eq!(snap_a, snapshot(&b), "same seed must reproduce bytes");
    assert_eq!(snap_a.len(), 3 * 6, "three bundles of six files each");
    assert_ne!(snap_a, snapshot(&c), "seed override must change the scenes");
}

#[test]
fn pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_config(tmp.path(), "");
    let cfg = cfg_path.to_str().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("run");
    assert_eq!(
        run_args(&["gen", "--config", cfg, "--out", data.to_str().unwrap(), "--quiet"]),
        EXIT_OK
    );
    assert_eq!(
        run_args(&["pretrain", "--config", cfg, "--out", out.to_str().unwrap(), "--quiet"]),
        EXIT_OK
    );
    let ckpt = out.join("ckpt.f32");
    assert!(ckpt.is_file());
    let log = fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,loss,loss_s,loss_t,self_frac,lr\n"));
    assert_eq!(log.lines().count(), 3, "header plus one line per epoch");

    assert_eq!(
        run_args(&[
            "eval-zero",
            "--config",
            cfg,
            "--out",
            out.to_str().unwrap(),
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--quiet",
        ]),
        EXIT_OK
    );
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(report["class_names"].as_array().unwrap().len(), 3);
    assert!(report["miou"].as_f64().unwrap() >= 0.0);
    assert_eq!(report["point_count"].as_u64().unwrap(), 3 * 2 * 90);
    for i in 0..3 {
        let map = fs::read_to_string(out.join(format!("error_map_{i:03}.txt"))).unwrap();
        assert!(map.starts_with("x y z gt pred correct\n"));
        assert_eq!(map.lines().count(), 1 + 2 * 90);
    }

    assert_eq!(
        run_args(&[
            "eval-probe",
            "--config",
            cfg,
            "--out",
            out.to_str().unwrap(),
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--fraction",
            "0.2",
            "--quiet",
        ]),
        EXIT_OK
    );
    for name in ["probe_train_report.json", "probe_eval_report.json"] {
        let report: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join(name)).unwrap()).unwrap();
        assert!(report["miou"].as_f64().unwrap() >= 0.0);
    }
}

#[test]
fn pretrain_is_bitwise_deterministic_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_config(tmp.path(), "");
    let cfg = cfg_path.to_str().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(
        run_args(&["gen", "--config", cfg, "--out", data.to_str().unwrap(), "--quiet"]),
        EXIT_OK
    );
    let a = tmp.path().join("run_a");
    let b = tmp.path().join("run_b");
    for out in [&a, &b] {
        assert_eq!(
            run_args(&["pretrain", "--config", cfg, "--out", out.to_str().unwrap(), "--quiet"]),
            EXIT_OK
        );
    }
    assert_eq!(
        fs::read(a.join("ckpt.f32")).unwrap(),
        fs::read(b.join("ckpt.f32")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("train_log.csv")).unwrap(),
        fs::read(b.join("train_log.csv")).unwrap()
    );
}

#[test]
fn validation_problems_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let out = out.to_str().unwrap();

    // Unknown config key.
    let bad_key = tmp.path().join("bad_key.txt");
    fs::write(&bad_key, "scene.seed = 1\nscene.cuont = 2\n").unwrap();
    assert_eq!(
        run_args(&["gen", "--config", bad_key.to_str().unwrap(), "--out", out]),
        EXIT_FAILURE
    );

    // Missing config file.
    let missing = tmp.path().join("nope.txt");
    assert_eq!(
        run_args(&["gen", "--config", missing.to_str().unwrap(), "--out", out]),
        EXIT_FAILURE
    );

    // Pretrain without data.dir.
    let no_data = tmp.path().join("no_data.txt");
    fs::write(&no_data, "train.epochs = 1\ntrain.switch_epoch = 0\n").unwrap();
    assert_eq!(
        run_args(&["pretrain", "--config", no_data.to_str().unwrap(), "--out", out]),
        EXIT_FAILURE
    );

    // eval-zero with a checkpoint that does not exist.
    let cfg = write_config(tmp.path(), "");
    let cfg = cfg.to_str().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(
        run_args(&["gen", "--config", cfg, "--out", data.to_str().unwrap(), "--quiet"]),
        EXIT_OK
    );
    let ghost = tmp.path().join("ghost.f32");
    assert_eq!(
        run_args(&[
            "eval-zero",
            "--config",
            cfg,
            "--out",
            out,
            "--ckpt",
            ghost.to_str().unwrap(),
        ]),
        EXIT_FAILURE
    );
}

#[test]
fn probe_holdout_must_leave_scenes_on_both_sides() {
    let tmp = tempfile::tempdir().unwrap();
    // One scene only: default holdout ceil(1/2) = 1 would hold out everything.
    let cfg_path = write_config(tmp.path(), "");
    let text = fs::read_to_string(&cfg_path)
        .unwrap()
        .replace("scene.count = 3", "scene.count = 1");
    fs::write(&cfg_path, text).unwrap();
    let cfg = cfg_path.to_str().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("out");
    assert_eq!(
        run_args(&["gen", "--config", cfg, "--out", data.to_str().unwrap(), "--quiet"]),
        EXIT_OK
    );

    // A checkpoint to feed in: random init from a zero-epoch pretrain.
    let pre = tmp.path().join("pre");
    let zero_cfg = tmp.path().join("zero.txt");
    let text = fs::read_to_string(cfg)
        .unwrap()
        .replace("train.epochs = 2", "train.epochs = 0")
        .replace("train.switch_epoch = 1", "train.switch_epoch = 0");
    fs::write(&zero_cfg, text).unwrap();
    assert_eq!(
        run_args(&[
            "pretrain",
            "--config",
            zero_cfg.to_str().unwrap(),
            "--out",
            pre.to_str().unwrap(),
            "--quiet",
        ]),
        EXIT_OK
    );
    assert_eq!(
        run_args(&[
            "eval-probe",
            "--config",
            cfg,
            "--out",
            out.to_str().unwrap(),
            "--ckpt",
            pre.join("ckpt.f32").to_str().unwrap(),
        ]),
        EXIT_FAILURE
    );
}

#[test]
fn gradcheck_and_losscheck_pass() {
    assert_eq!(run_args(&["gradcheck", "--seed", "1", "--quiet"]), EXIT_OK);
    assert_eq!(run_args(&["losscheck", "--seed", "1", "--quiet"]), EXIT_OK);
}

#[test]
fn thread_cap_does_not_change_generated_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let bin = env!("CARGO_BIN_EXE_clip2scene");
    let a = tmp.path().join("threads_1");
    let b = tmp.path().join("threads_3");
    for (dir, cap) in [(&a, "1"), (&b, "3")] {
        let status = Command::new(bin)
            .args(["gen", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap(), "--quiet"])
            .env("CLIP2SCENE_THREADS", cap)
            .status()
            .unwrap();
        assert!(status.success());
    }
    assert_eq!(snapshot(&a), snapshot(&b));

    // Zero means auto.
    let c = tmp.path().join("threads_auto");
    let status = Command::new(bin)
        .args(["gen", "--config", cfg.to_str().unwrap(), "--out", c.to_str().unwrap(), "--quiet"])
        .env("CLIP2SCENE_THREADS", "0")
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(snapshot(&a), snapshot(&c));

    // Garbage is a validation error, not a crash.
    let status = Command::new(bin)
        .args(["gen", "--config", cfg.to_str().unwrap(), "--out", c.to_str().unwrap(), "--quiet"])
        .env("CLIP2SCENE_THREADS", "many")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(EXIT_FAILURE));
}
