use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use glyphmoe::train::config::KEYS;

fn glyphmoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glyphmoe")).args(args).output().expect("spawn glyphmoe")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                files.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn small_data(dir: &Path) {
    let out = glyphmoe(&[
        "gen-data",
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        "1",
        "--fonts",
        "4",
        "--unseen-fonts",
        "1",
        "--chars",
        "8",
        "--unseen-chars",
        "2",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gen_data_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    small_data(&a);
    small_data(&b);
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.len() > 30);
    assert_eq!(ta, tb);
}

#[test]
fn existing_outputs_need_force() {
    let tmp = tempfile::tempdir().unwrap();
    small_data(tmp.path());
    let d = tmp.path().to_str().unwrap();
    let again = glyphmoe(&[
        "gen-data",
        "--out",
        d,
        "--seed",
        "1",
        "--fonts",
        "4",
        "--unseen-fonts",
        "1",
        "--chars",
        "8",
        "--unseen-chars",
        "2",
    ]);
    assert_eq!(code(&again), 1);
    let forced = glyphmoe(&[
        "gen-data",
        "--out",
        d,
        "--seed",
        "1",
        "--fonts",
        "4",
        "--unseen-fonts",
        "1",
        "--chars",
        "8",
        "--unseen-chars",
        "2",
        "--force",
    ]);
    assert_eq!(code(&forced), 0);
}

#[test]
fn exit_codes() {
    assert_eq!(code(&glyphmoe(&["--help"])), 0);
    assert_eq!(code(&glyphmoe(&["train", "--help"])), 0);
    assert_eq!(code(&glyphmoe(&["--version"])), 0);
    assert_eq!(code(&glyphmoe(&[])), 1);
    assert_eq!(code(&glyphmoe(&["train", "--no-such-flag"])), 1);
    assert_eq!(code(&glyphmoe(&["eval", "--data", "x"])), 1);
    assert_eq!(code(&glyphmoe(&["eval", "--ckpt", "c", "--data", "d", "--split", "train-ish", "--out", "o"])), 1);
    assert_eq!(code(&glyphmoe(&["train", "--steps", "0", "--data-dir", "d", "--out-dir", "o"])), 1);
    assert_eq!(code(&glyphmoe(&["train", "--variant", "bigger", "--data-dir", "d", "--out-dir", "o"])), 1);
    assert_eq!(code(&glyphmoe(&["gen-data", "--out", "o", "--fonts", "2", "--unseen-fonts", "2"])), 1);
    // A missing file is a runtime failure, not a usage error.
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.mxpp");
    let out = glyphmoe(&["eval", "--ckpt", missing.to_str().unwrap(), "--data", "d", "--split", "ufuc", "--out", "o"]);
    assert_eq!(code(&out), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
}

#[test]
fn sabotaged_gradcheck_exits_one() {
    let out = glyphmoe(&["gradcheck", "--sabotage", "conv2d"]);
    assert_eq!(code(&out), 1);
    assert!(stdout(&out).contains("FAIL"));
}

#[test]
fn train_help_matches_config_table() {
    let help = stdout(&glyphmoe(&["train", "--help"]));
    for (key, default, _) in KEYS {
        let flag = format!("--{}", key.replace('_', "-"));
        let line = help
            .lines()
            .find(|l| l.trim_start().starts_with(&format!("{flag} ")))
            .unwrap_or_else(|| panic!("{flag} missing from help"));
        let shown = if default.is_empty() { "none" } else { default };
        assert!(line.contains(&format!("[default: {shown}]")), "{line}");
    }
    let extra = ["--config", "--resume", "--force", "--progress", "--help"];
    for line in help.lines().map(str::trim_start).filter(|l| l.starts_with("--")) {
        let flag = line.split_whitespace().next().unwrap();
        let known = extra.contains(&flag) || KEYS.iter().any(|(k, _, _)| flag == format!("--{}", k.replace('_', "-")));
        assert!(known, "undocumented flag {flag}");
    }
}

#[test]
fn flags_override_config_and_commands_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_data(&data);
    let run = tmp.path().join("run");
    let cfg = tmp.path().join("cfg.txt");
    fs::write(
        &cfg,
        format!(
            "steps = 5\nbatch_size = 2\nn_style_refs = 2\nchannels = 4\nexperts = 3\nblocks_per_expert = 1\ndata_dir = {}\nout_dir = {}\n",
            data.display(),
            run.display()
        ),
    )
    .unwrap();
    let out = glyphmoe(&["train", "--config", cfg.to_str().unwrap(), "--steps", "2", "--progress", "0"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let log = fs::read_to_string(run.join("loss.tsv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let saved = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(saved.contains("steps = 2\n") && saved.contains("batch_size = 2\n"));

    // A second run into the same directory is refused.
    let again = glyphmoe(&["train", "--config", cfg.to_str().unwrap(), "--steps", "2", "--progress", "0"]);
    assert_eq!(code(&again), 1);

    let ckpt = run.join("ckpt_000002.mxpp");
    let ev = tmp.path().join("eval");
    let out = glyphmoe(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--split",
        "ufuc",
        "--out",
        ev.to_str().unwrap(),
        "--refs",
        "2",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("pairs=2\n"));
    assert!(stdout(&out).contains("leakage_audit=pass"));
    assert_eq!(fs::read_to_string(ev.join("pairs.tsv")).unwrap().lines().count(), 3);

    let gen = tmp.path().join("gen");
    let args = [
        "generate",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--font-id",
        "3",
        "--chars",
        "6,7",
        "--out",
        gen.to_str().unwrap(),
    ];
    assert_eq!(code(&glyphmoe(&args)), 0);
    assert!(gen.join("f003_c006.pgm").exists() && gen.join("f003_c007.pgm").exists());
    assert_eq!(code(&glyphmoe(&args)), 1);
    let mut bad = args.to_vec();
    bad[6] = "9";
    bad.push("--force");
    assert_eq!(code(&glyphmoe(&bad)), 1);
}

#[test]
fn ablate_writes_comparison_table() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_data(&data);
    let out_dir = tmp.path().join("abl");
    let out = glyphmoe(&[
        "ablate",
        "--seeds",
        "2",
        "--steps",
        "1",
        "--batch-size",
        "1",
        "--n-style-refs",
        "1",
        "--channels",
        "4",
        "--experts",
        "3",
        "--blocks-per-expert",
        "1",
        "--data-dir",
        data.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
        "--progress",
        "0",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let tsv = fs::read_to_string(out_dir.join("ablation.tsv")).unwrap();
    // Header, 3 variants × 2 seeds, 3 means.
    assert_eq!(tsv.lines().count(), 10);
    assert!(out_dir.join("no_hae_seed1").join("eval_ufuc").join("summary.txt").exists());
}
