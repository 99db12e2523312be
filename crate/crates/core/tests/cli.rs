use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BLOBS: &str = r#"
[model]
family = "toy-resnet"

[data]
source = "blobs"
classes = 3
train_per_class = 12
eval_per_class = 8
shape = [3, 8, 8]
noise = 0.5
grid = 2
seed = 4

[train]
epochs = 2
batch_size = 12
lr = 0.05
generations = 2
seed = 9
"#;

fn kevo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kevo"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("experiment.toml");
    fs::write(&path, text).unwrap();
    path
}

fn run_ok(args: &[&str]) -> String {
    let out = kevo(args);
    assert!(
        out.status.success(),
        "kevo {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn profile_prints_resnet18_totals() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[model]\nfamily = \"resnet18\"\nclasses = 102\ninput = [3, 224, 224]\n",
    );
    let cfg = cfg.to_str().unwrap();
    for (flag, ops_target, params_target) in [(None, 3.632420, 11.285862), (Some("--slim"), 0.968436, 2.853606)] {
        let mut args = vec!["--config", cfg, "profile"];
        args.extend(flag);
        let csv = run_ok(&args);
        assert!(csv.starts_with("node,kind,ops,params\n"));
        let total = csv.lines().last().unwrap();
        let cells: Vec<&str> = total.split(',').collect();
        assert_eq!(cells[0], "total");
        let ops = cells[2].parse::<f64>().unwrap() / 1e9;
        let params = cells[3].parse::<f64>().unwrap() / 1e6;
        assert!((ops - ops_target).abs() / ops_target < 0.01, "{ops}");
        assert!((params - params_target).abs() / params_target < 0.01, "{params}");
    }
}

#[test]
fn single_generation_writes_one_checkpoint_and_one_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), BLOBS);
    let out = dir.path().join("run");
    run_ok(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--override",
        "train.generations=1",
        "evolve",
    ]);
    let checkpoints: Vec<_> = fs::read_dir(out.join("checkpoints")).unwrap().collect();
    assert_eq!(checkpoints.len(), 1);
    assert!(out.join("checkpoints/gen-1.kevo").exists());
    let logs = fs::read_to_string(out.join("logs.jsonl")).unwrap();
    assert_eq!(logs.lines().count(), 1);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 2);
}

#[test]
fn extracted_slim_scores_like_masked_dense() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), BLOBS);
    let cfg = cfg.to_str().unwrap();
    run_ok(&["--config", cfg, "evolve"]);
    let dims = run_ok(&["--config", cfg, "extract"]);
    assert!(dims.starts_with("tensor,dense,slim\n"));
    assert!(dir.path().join("runs/default/slim.kevo").exists());
    assert!(dir.path().join("runs/default/slim_dims.csv").exists());

    let slim_ck = dir.path().join("runs/default/slim.kevo");
    let slim: serde_json::Value = serde_json::from_str(&run_ok(&[
        "--config",
        cfg,
        "eval",
        "--checkpoint",
        slim_ck.to_str().unwrap(),
    ]))
    .unwrap();
    let masked: serde_json::Value = serde_json::from_str(&run_ok(&["--config", cfg, "eval", "--masked"])).unwrap();
    let (a, b) = (slim["top1"].as_f64().unwrap(), masked["top1"].as_f64().unwrap());
    assert_eq!(format!("{a:.4}"), format!("{b:.4}"));
}

#[test]
fn resumed_run_writes_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), BLOBS);
    let cfg = cfg.to_str().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_ok(&[
        "--config",
        cfg,
        "--out",
        a.to_str().unwrap(),
        "--override",
        "train.generations=3",
        "evolve",
    ]);
    run_ok(&["--config", cfg, "--out", b.to_str().unwrap(), "evolve"]);
    let resume_from = b.join("checkpoints/gen-2.kevo");
    run_ok(&[
        "--config",
        cfg,
        "--out",
        b.to_str().unwrap(),
        "--override",
        "train.generations=3",
        "evolve",
        "--resume",
        resume_from.to_str().unwrap(),
    ]);
    let read = |p: &Path| kevo::io::Checkpoint::load(&p.join("checkpoints/gen-3.kevo")).unwrap();
    let (a3, b3) = (read(&a), read(&b));
    // the config echoes differ in `out`; weights and mask must not
    assert_eq!(a3.params, b3.params);
    assert_eq!(a3.mask, b3.mask);
    assert_eq!(a3.meta.generation, 3);
    let logs = fs::read_to_string(b.join("logs.jsonl")).unwrap();
    assert_eq!(logs.lines().count(), 3);
}

#[test]
fn resume_with_different_settings_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), BLOBS);
    let cfg = cfg.to_str().unwrap();
    run_ok(&["--config", cfg, "--override", "train.generations=1", "evolve"]);
    let ck = dir.path().join("runs/default/checkpoints/gen-1.kevo");
    let out = kevo(&[
        "--config",
        cfg,
        "--override",
        "train.lr=0.5",
        "evolve",
        "--resume",
        ck.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn analyze_recomputes_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let text = BLOBS.replace("seed = 9", "seed = 9\ntechnique = \"wels\"\nmask_policy = \"resample\"");
    let cfg = write_config(dir.path(), &text);
    let cfg = cfg.to_str().unwrap();
    run_ok(&["--config", cfg, "evolve"]);
    run_ok(&["--config", cfg, "analyze"]);
    let h2d = fs::read_to_string(dir.path().join("runs/default/h2d.csv")).unwrap();
    let row: Vec<&str> = h2d.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "2");

    // matches the value logged during training
    let summary = fs::read_to_string(dir.path().join("runs/default/summary.csv")).unwrap();
    let rows = kevo::io::parse_csv(&summary).unwrap();
    assert_eq!(rows[1].s_h2d.unwrap(), row[1].parse::<f64>().unwrap());
    let stats = fs::read_to_string(dir.path().join("runs/default/analysis.csv")).unwrap();
    assert!(stats.starts_with("generation,node,mean_abs_fit,mean_abs_reset\n"));
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    let typo = write_config(dir.path(), &BLOBS.replace("lr = 0.05", "lr = 0.05\nspilt_rate = 0.5"));
    assert_eq!(
        kevo(&["--config", typo.to_str().unwrap(), "train"]).status.code(),
        Some(2)
    );

    let cfg = write_config(dir.path(), BLOBS);
    let cfg = cfg.to_str().unwrap();
    assert_eq!(kevo(&["--config", cfg, "frobnicate"]).status.code(), Some(2));
    assert_eq!(kevo(&["train"]).status.code(), Some(2));
    assert_eq!(
        kevo(&["--config", cfg, "--override", "train.split_rate=2", "train"])
            .status
            .code(),
        Some(2)
    );

    let sub = dir.path().join("idx");
    fs::create_dir(&sub).unwrap();
    let missing = write_config(
        &sub,
        "[model]\nfamily = \"mlp\"\ninput = [784, 1, 1]\n\n[data]\nsource = \"idx\"\ntrain_images = \"nope-images\"\n\
         train_labels = \"nope-labels\"\neval_images = \"nope-images\"\neval_labels = \"nope-labels\"\n",
    );
    assert_eq!(
        kevo(&["--config", missing.to_str().unwrap(), "train"]).status.code(),
        Some(3)
    );

    let exploding = kevo(&[
        "--config",
        cfg,
        "--override",
        "train.lr=1e30",
        "--override",
        "train.momentum=0",
        "train",
    ]);
    assert_eq!(
        exploding.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&exploding.stderr)
    );
}

#[test]
fn train_runs_only_the_first_generation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), BLOBS);
    run_ok(&["--config", cfg.to_str().unwrap(), "--seed", "3", "train"]);
    let names: Vec<String> = fs::read_dir(dir.path().join("runs/default/checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["gen-1.kevo"]);
    let ck = kevo::io::Checkpoint::load(&dir.path().join("runs/default/checkpoints/gen-1.kevo")).unwrap();
    assert!(ck.meta.config.unwrap().contains("seed = 3"));
}
