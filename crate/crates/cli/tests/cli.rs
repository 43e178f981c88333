use std::fs;
use std::path::Path;
use std::process::Command;

fn m3t(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_m3t")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "m3t {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: &str = "
month_days = 6
episodes = 1
batch_size = 16
replay_capacity = 256
learn_every = 8
macro_epochs = 5
micro_model_dim = 8
micro_ff_dim = 8
micro_branch_dim = 4
";

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_pipeline_from_generated_files() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = root.join("exp.txt");
    fs::write(&cfg, SMALL).unwrap();
    let data = root.join("data");
    m3t(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    assert_eq!(fs::read_dir(&data).unwrap().count(), 2 * 26);

    let replay = root.join("replay.txt");
    fs::write(&replay, format!("{SMALL}data_dir = {}\n", data.display())).unwrap();
    let profiles = root.join("profiles.csv");
    m3t(&["profiles", "--config", s(&replay), "--out", s(&profiles)]);
    let text = fs::read_to_string(&profiles).unwrap();
    assert!(text.starts_with("day_id,f1,f2,f3,f4,f5,f6,f7,f8\n"));
    assert_eq!(text.lines().count(), 27);

    let ckpt = root.join("ckpt");
    m3t(&["train", "--config", s(&replay), "--agent", "ddqn", "--seed", "3", "--out", s(&ckpt)]);
    let rl = root.join("bt_ddqn");
    m3t(&[
        "backtest", "--config", s(&replay), "--agent", "ddqn", "--seed", "3", "--checkpoint", s(&ckpt), "--out", s(&rl),
    ]);
    let rule = root.join("bt_vwap");
    m3t(&["backtest", "--config", s(&replay), "--agent", "vwap", "--out", s(&rule)]);

    let merged = root.join("report");
    m3t(&["report", s(&rule), s(&rl), "--out", s(&merged)]);
    let table = fs::read_to_string(merged.join("slippage.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "model,SYN");
    assert!(rows[1].starts_with("VWAP,") && rows[2].starts_with("DDQN,"));
    assert!(rows[1].contains('±'));
}

#[test]
fn missing_checkpoint_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_m3t"))
        .args(["backtest", "--agent", "m3t", "--out", s(tmp.path())])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint missing"));
}

#[test]
fn bad_override_is_rejected() {
    let out = Command::new(env!("CARGO_BIN_EXE_m3t"))
        .args(["train", "--set", "episodes=0", "--out", "/nonexistent"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
