use std::fs;
use std::path::Path;
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_han-rdm");

fn fixture(dir: &Path) -> std::path::PathBuf {
    let text = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/tiny.toml")).unwrap();
    let text = text.replace("../target/tiny/", "");
    let path = dir.join("tiny.toml");
    fs::write(&path, text).unwrap();
    path
}

fn run(args: &[&str]) -> std::process::Output {
    Command::new(BIN).args(args).env("RUST_LOG", "warn").output().unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(run(&["bogus"]).status.code(), Some(1));
    assert_eq!(run(&["train"]).status.code(), Some(1));
    assert_eq!(run(&["estimate", "--config", "/nonexistent.toml"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn estimate_without_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());
    let out = run(&["estimate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing"));
}

fn full_run(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let cfg = fixture(dir);
    let c = cfg.to_str().unwrap();
    for cmd in ["train", "estimate", "entropy"] {
        let out = run(&[cmd, "--config", c, "--jobs", "1", "--seed", "99"]);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir.join("reports"))
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .filter(|(n, _)| n.ends_with(".csv"))
        .collect();
    files.sort();
    files
}

#[test]
fn equal_seeds_give_identical_csvs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (fa, fb) = (full_run(a.path()), full_run(b.path()));
    assert_eq!(fa.len(), 4);
    assert_eq!(fa, fb);
    for (name, bytes) in &fa {
        let text = String::from_utf8_lossy(bytes);
        assert!(text.starts_with("# config="), "{name}");
        let first = text.lines().next().unwrap();
        assert!(first.contains("seed=99"), "{name}");
        assert!(first.contains("checkpoint"), "{name}");
    }
}

#[test]
fn oracle_output_is_tagged() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());
    let out = run(&["oracle", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success());
    let text = fs::read_to_string(dir.path().join("reports/L4_l1_k1_dt0.4_rho_oracle.csv")).unwrap();
    assert!(text.lines().next().unwrap().contains("oracle=true"));
    assert_eq!(text.lines().count(), 6);
    let gs = fs::read_to_string(dir.path().join("reports/ground_state_entropies_oracle.csv")).unwrap();
    assert!(gs.lines().nth(1).unwrap() == "l,n,value");
}
