use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[data]
n_images = 40
height = 32
width = 32
val_size = 6
test_size = 6
labeled_fraction = "1/4"

[model]
hidden_units = 4

[geometry]
crop_size = 16

[schedule]
stage1_epochs = 2
stage2_max_epochs = 3

[selection]
patience = 1
"#;

fn cwseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cwseg")).args(args).output().expect("binary runs")
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = cwseg(&["gen-data", "--seed", "7", "--out", d.to_str().unwrap(), "--set", "data.n_images=50"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 50 * 2 + 2);
    assert_eq!(ta, tb);
    assert!(fs::read_to_string(a.join("config.resolved")).unwrap().contains("seed = 7"));
}

#[test]
fn negative_weight_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[loss]\nlambda_bcc = -0.5\n").unwrap();
    let out = tmp.path().join("out");
    let o = cwseg(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("lambda_bcc"), "{}", stderr(&o));
    assert!(!out.join("metrics.csv").exists());
}

#[test]
fn unknown_key_and_axis_are_validation_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = cwseg(&["train", "--out", out.to_str().unwrap(), "--set", "loss.lambda_bc=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("lambda_bc"), "{}", stderr(&o));

    let o = cwseg(&["ablate", "--out", out.to_str().unwrap(), "--axis", "depth"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("depth"));

    let o = cwseg(&["train", "--out", out.to_str().unwrap(), "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_config_file_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cwseg(&[
        "train",
        "--config",
        tmp.path().join("nope.toml").to_str().unwrap(),
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_eval_and_score_dump_write_their_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("run");
    let o = cwseg(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["config.resolved", "report.json", "metrics.csv", "steps.csv", "dpm_log.jsonl", "data/manifest"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(out.join("checkpoints/last.ckpt").exists());
    assert!(out.join("checkpoints/epoch_0005.ckpt").exists());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["epochs"], 5);
    assert_eq!(report["config_hash"].as_str().unwrap().len(), 64);

    let ev = tmp.path().join("eval");
    let ckpt = out.join("checkpoints/last.ckpt");
    let o = cwseg(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        ev.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let eval_csv = fs::read_to_string(ev.join("eval.csv")).unwrap();
    let test_row = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let test_row = test_row.lines().last().unwrap();
    assert_eq!(eval_csv.lines().nth(1).unwrap(), test_row);

    let sd = tmp.path().join("scores");
    let o = cwseg(&[
        "score-dump",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        sd.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = fs::read_to_string(sd.join("scores.csv")).unwrap();
    // 40 images - 12 held out = 28; a quarter labeled leaves 21 unlabeled.
    assert_eq!(rows.lines().count(), 1 + 21);
}

#[test]
fn halted_then_resumed_run_matches_uninterrupted() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let (full, split) = (tmp.path().join("full"), tmp.path().join("split"));
    let c = cfg.to_str().unwrap();
    assert!(cwseg(&["train", "--config", c, "--out", full.to_str().unwrap()]).status.success());
    let o = cwseg(&["train", "--config", c, "--out", split.to_str().unwrap(), "--halt-after-epoch", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!split.join("report.json").exists());
    let ckpt = split.join("checkpoints/last.ckpt");
    let o = cwseg(&["train", "--config", c, "--out", split.to_str().unwrap(), "--resume", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["metrics.csv", "steps.csv", "dpm_log.jsonl", "report.json", "checkpoints/last.ckpt"] {
        assert_eq!(fs::read(full.join(f)).unwrap(), fs::read(split.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn ratio_sweep_emits_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("abl");
    let o = cwseg(&[
        "ablate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--axis",
        "ratio",
        "--values",
        "0.2,0.5,0.8",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for (row, v) in rows.iter().zip(["0.2", "0.5", "0.8"]) {
        assert!(row.starts_with(&format!("ratio,{v},")), "{row}");
    }
}
