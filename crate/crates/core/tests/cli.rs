use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_toposignal"))
}

fn toy() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join("toy.json")
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn train(dir: &Path) {
    let toy = toy();
    run(&[
        "train",
        "--scenario",
        toy.to_str().unwrap(),
        "--seed",
        "3",
        "--iters",
        "2",
        "--envs",
        "2",
        "--set",
        "ppo.rollout_decisions=3",
        "--set",
        "sim.episode_length=60",
        "--out",
        dir.to_str().unwrap(),
        "--plots",
    ]);
}

#[test]
fn train_is_reproducible_and_feeds_the_other_commands() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    train(a.path());
    train(b.path());
    for f in ["manifest.json", "metrics.csv", "checkpoint.bin"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert_eq!(x, y, "{f} differs between identical runs");
    }
    let metrics = std::fs::read_to_string(a.path().join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("iteration,mean_reward,mean_travel_time_s,mean_delay_s,vehicles_completed,teleports,tgn_mse"));
    assert_eq!(metrics.lines().count(), 3);
    assert!(a.path().join("reward.svg").exists());

    let toy = toy();
    let ckpt = a.path().join("checkpoint.bin");
    let out = run(&[
        "eval",
        "--scenario",
        toy.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--interval",
        "3",
    ]);
    let csv = String::from_utf8(out.stdout).unwrap();
    assert!(csv.starts_with("controller,interval_s,arrival_seed"));
    assert!(csv.lines().nth(1).unwrap().starts_with("learned,3,"));

    let out = run(&[
        "pd",
        "--scenario",
        toy.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--t",
        "20",
    ]);
    let pd = String::from_utf8(out.stdout).unwrap();
    assert!(pd.starts_with("filtration,dimension,birth,death,essential,creator"));
    assert!(pd.lines().count() > 1);

    let emb = tempfile::tempdir().unwrap();
    run(&[
        "dump-embeddings",
        "--scenario",
        toy.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--set",
        "sim.episode_length=30",
        "--out",
        emb.path().to_str().unwrap(),
    ]);
    let e = std::fs::read_to_string(emb.path().join("embeddings.csv")).unwrap();
    let header: Vec<&str> = e.lines().next().unwrap().split(',').collect();
    assert_eq!(header.len(), 3 + 28);
    assert!(e.lines().count() > 1);
}

#[test]
fn baselines_evaluate_without_a_checkpoint() {
    let toy = toy();
    for c in ["fixed", "random"] {
        let out = run(&["eval", "--scenario", toy.to_str().unwrap(), "--controller", c, "--episodes", "2"]);
        assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 3);
    }
}

#[test]
fn bench_and_gradcheck_write_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["bench-expressiveness", "--seeds", "5", "--out", dir.path().to_str().unwrap()]);
    assert!(!out.stdout.is_empty());
    let bench = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert!(bench.lines().next().unwrap().contains("margin_ablated"));
    assert_eq!(bench.lines().count(), 6);
    assert!(dir.path().join("manifest.json").exists());

    let out = run(&["gradcheck", "--seeds", "1"]);
    assert!(!out.stdout.is_empty());
}

#[test]
fn unknown_flags_and_bad_input_fail() {
    let out = bin().args(["train", "--no-such-flag"]).output().unwrap();
    assert!(!out.status.success());
    let out = bin().args(["eval", "--scenario", "/nonexistent.json", "--controller", "fixed"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}
