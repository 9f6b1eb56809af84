use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn rsrnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rsrnet"))
        .args(args)
        .env_remove("RSRNET_OUT_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "stdout:\n{}\nstderr:\n{}", stdout(&o), stderr(&o));
    stdout(&o)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree_hashes(root: &Path) -> Vec<(PathBuf, String)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let digest = Sha256::digest(std::fs::read(&path).unwrap());
                let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), hex));
            }
        }
    }
    out.sort();
    out
}

fn dataset(dir: &Path, n: usize) -> PathBuf {
    let data = dir.join("data");
    ok(rsrnet(&["generate-data", "--n", &n.to_string(), "--seed", "3", "--out", p(&data)]));
    data
}

/// Trains a tiny model and returns its checkpoint.
fn tiny_checkpoint(dir: &Path, data: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("run");
    let mut args = vec!["train", "--data", p(data), "--out", p(&out), "--max-steps", "1", "--batch-size", "2"];
    args.extend_from_slice(extra);
    ok(rsrnet(&args));
    out.join("model.ckpt")
}

#[test]
fn usage_errors_exit_with_one() {
    for args in [&["frobnicate"][..], &["train", "--bogus"][..], &[][..]] {
        let o = rsrnet(args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(stderr(&o).contains("Usage"), "{args:?}: {}", stderr(&o));
    }
    assert_eq!(rsrnet(&["--help"]).status.code(), Some(0));
}

#[test]
fn generate_data_is_deterministic_and_summarized() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let out = ok(rsrnet(&["generate-data", "--n", "20", "--seed", "42", "--out", p(&a)]));
    ok(rsrnet(&["generate-data", "--n", "20", "--seed", "42", "--out", p(&b)]));
    assert_eq!(tree_hashes(&a), tree_hashes(&b));
    assert_eq!(tree_hashes(&a).len(), 20 * 3 + 1);
    let max: f64 = out.split("max ").nth(1).unwrap().trim().parse().unwrap();
    assert!(max < 0.5, "{out}");
    let o = rsrnet(&["generate-data", "--n", "0", "--out", p(&dir.path().join("c"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("env_out");
    let o = Command::new(env!("CARGO_BIN_EXE_rsrnet"))
        .args(["generate-data", "--n", "3"])
        .env("RSRNET_OUT_DIR", &target)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(target.join("split.txt").exists());
}

#[test]
fn train_eval_infer_visualize() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 10);
    let ckpt = tiny_checkpoint(dir.path(), &data, &[]);
    assert!(ckpt.exists());

    let report = ok(rsrnet(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data)]));
    for col in ["AP(%)↑", "F1↑", "IoU(%)↑", "M_fnl"] {
        assert!(report.contains(col), "{report}");
    }

    let image = data.join("images/s00000.png");
    let masks = dir.path().join("masks");
    ok(rsrnet(&["infer", "--checkpoint", p(&ckpt), "--out", p(&masks), "--dump-all", p(&image)]));
    assert_eq!(std::fs::read_dir(&masks).unwrap().count(), 4);

    let viz = dir.path().join("viz");
    let gt = data.join("masks/s00000.png");
    ok(rsrnet(&["visualize", "--checkpoint", p(&ckpt), "--image", p(&image), "--gt", p(&gt), "--out", p(&viz)]));
    let names: Vec<String> = std::fs::read_dir(&viz)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(names.iter().filter(|n| n.starts_with("iter_mask_")).count(), 12);
    let sims: Vec<&String> = names.iter().filter(|n| n.starts_with("sim_")).collect();
    assert_eq!(sims.len(), 24);
    assert!(sims.iter().all(|n| n.starts_with("sim_l0_") || n.starts_with("sim_l3_")));
    assert!(names.contains(&"fusion_panel.png".to_string()));

    let cx = ok(rsrnet(&["complexity", "--checkpoint", p(&ckpt), "--timing-runs", "0"]));
    let exact: usize = cx.split("parameter count (exact): ").nth(1).unwrap().lines().next().unwrap().parse().unwrap();
    let manifest: usize = cx.split("checkpoint manifest total: ").nth(1).unwrap().trim().parse().unwrap();
    assert_eq!(exact, manifest);
}

#[test]
fn ablation_flag_changes_topology() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 4);
    let ckpt = tiny_checkpoint(dir.path(), &data, &["--ablate", "no_gru", "--iterations", "2"]);
    let saved = std::fs::read_to_string(dir.path().join("run/config.toml")).unwrap();
    assert!(saved.contains("no_gru = true"), "{saved}");
    let text = String::from_utf8_lossy(&std::fs::read(&ckpt).unwrap()).into_owned();
    assert!(text.contains("rsr.plain"));
    assert!(!text.contains("rsr.gru"));
    let o = rsrnet(&["train", "--data", p(&data), "--out", p(&dir.path().join("x")), "--ablate", "no_gruu"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no_gruu"));
}

#[test]
fn config_file_takes_precedence_over_flags() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 4);
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "seed = 5\nnum_iterations = 2\n").unwrap();
    let out = dir.path().join("run");
    ok(rsrnet(&[
        "train", "--data", p(&data), "--out", p(&out), "--max-steps", "1", "--seed", "9", "--iterations", "4", "--config", p(&cfg),
    ]));
    let saved = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(saved.contains("seed = 5"), "{saved}");
    assert!(saved.contains("num_iterations = 2"), "{saved}");
    assert!(saved.contains("max_steps = 1"), "{saved}");
}

#[test]
fn missing_inputs_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let o = rsrnet(&["eval", "--checkpoint", p(&missing), "--data", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope.ckpt"), "{}", stderr(&o));
    let o = rsrnet(&["train", "--data", p(&dir.path().join("nodata")), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nodata"), "{}", stderr(&o));
}

#[test]
fn diverging_training_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 4);
    let out = dir.path().join("run");
    let o = rsrnet(&[
        "train", "--data", p(&data), "--out", p(&out), "--lr", "1e30", "--max-steps", "6", "--batch-size", "1", "--iterations", "2",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let dump = std::fs::read_to_string(out.join("nan_dump.txt")).unwrap();
    assert!(dump.contains("batch s0"), "{dump}");
}

#[test]
fn ablate_prints_requested_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 5);
    let out = dir.path().join("abl");
    let table = ok(rsrnet(&[
        "ablate", "--data", p(&data), "--rows", "1,9", "--seeds", "1", "--max-steps", "1", "--iterations", "2", "--out", p(&out),
    ]));
    let main: Vec<&str> = table.split("Per-mask breakdown").next().unwrap().lines().collect();
    assert!(main.iter().any(|l| l.starts_with("1 ") && l.contains("UNet")));
    assert!(main.iter().any(|l| l.starts_with("9 ") && l.contains("full")));
    assert!(table.contains("M̄_rsr"));
    assert!(out.join("ablation.txt").exists());
    assert!(out.join("row9_seed1/model.ckpt").exists());
    let o = rsrnet(&["ablate", "--data", p(&data), "--rows", "10"]);
    assert_eq!(o.status.code(), Some(1));
}
