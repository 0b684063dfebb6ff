use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{"model":{"architecture":{"embed_dim":16,"depth":1,"heads":2},
    "pretrain":{"steps":4,"batch_size":4}},
    "schedule":{"steps":4},
    "grpo":{"iterations":ITERS,"group_size":4,"batch_pairs":1}}"#;

fn flowpaint(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowpaint"))
        .arg("--single-thread")
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn write_config(dir: &Path, name: &str, iterations: u64) -> String {
    let path = dir.join(name);
    std::fs::write(&path, TINY.replace("ITERS", &iterations.to_string())).unwrap();
    path.to_string_lossy().into_owned()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn help_lists_every_subcommand() {
    let out = flowpaint(&["--help"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    for sub in ["gen-data", "pretrain", "train-grpo", "sample", "eval", "ablate"] {
        assert!(text.contains(sub), "help lacks {sub}");
    }
}

#[test]
fn exit_codes_separate_config_and_io_failures() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"grpo":{"tau":0}}"#).unwrap();
    let out = flowpaint(&["--config", &s(&bad), "--out", &s(&dir.path().join("a")), "gen-data", "--count", "2"]);
    assert_eq!(code(&out), 2);

    let out = flowpaint(&["gen-data", "--count", "2", "--size", "48", "--out", &s(&dir.path().join("b"))]);
    assert_eq!(code(&out), 2);

    let out = flowpaint(&["--no-such-flag"]);
    assert_eq!(code(&out), 2);

    let missing = dir.path().join("nothing");
    let out = flowpaint(&["--out", &s(&dir.path().join("c")), "pretrain", "--data", &s(&missing)]);
    assert_eq!(code(&out), 3);
    assert!(!String::from_utf8(out.stderr).unwrap().is_empty());
}

#[test]
fn unwritable_output_leaves_no_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let out_dir = blocker.join("data");
    let out = flowpaint(&["--out", &s(&out_dir), "gen-data", "--count", "2"]);
    assert_eq!(code(&out), 3);
    assert!(!out_dir.join("manifest.json").exists());
    assert_eq!(std::fs::read_to_string(&blocker).unwrap(), "x");
}

fn data_rows(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

#[test]
fn resumed_grpo_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let one = write_config(root, "one.json", 1);
    let two = write_config(root, "two.json", 2);
    let data = s(&root.join("data"));
    let pre = s(&root.join("pre"));
    assert_eq!(code(&flowpaint(&["--config", &two, "--out", &data, "gen-data", "--count", "6"])), 0);
    assert_eq!(code(&flowpaint(&["--config", &two, "--out", &pre, "pretrain", "--data", &data])), 0);
    let init = s(&root.join("pre/ckpt"));

    let straight = root.join("straight");
    let out = flowpaint(&["--config", &two, "--out", &s(&straight), "train-grpo", "--data", &data, "--ckpt", &init]);
    assert_eq!(code(&out), 0);

    let resumed = root.join("resumed");
    let first = ["--config", &one, "--out", &s(&resumed), "train-grpo", "--data", &data, "--ckpt", &init];
    assert_eq!(code(&flowpaint(&first)), 0);
    let rest = ["--config", &two, "--out", &s(&resumed), "train-grpo", "--data", &data, "--ckpt", &init, "--resume"];
    assert_eq!(code(&flowpaint(&rest)), 0);

    let a = data_rows(&straight.join("metrics.csv"));
    let b = data_rows(&resumed.join("metrics.csv"));
    assert_eq!(a.len(), 3);
    assert_eq!(a, b);
    let blob = |p: &Path| std::fs::read(p.join("ckpt/ckpt.bin")).unwrap();
    assert!(blob(&straight) == blob(&resumed), "checkpoints differ after resume");
}
