#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

pub const SMOKE: [&str; 5] = ["gen-data", "pretrain", "train-smp", "prune", "finetune"];

pub fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.json")
}

/// Runs `smp <command> --config tiny.json <extra>` inside `root`; returns
/// the exit code and stderr.
pub fn smp(root: &Path, command: &str, extra: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_smp"))
        .current_dir(root)
        .arg(command)
        .arg("--config")
        .arg(fixture())
        .args(extra)
        .env("SMP_DETERMINISTIC", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

pub fn run_smoke(root: &Path) -> Result<(), String> {
    for c in SMOKE {
        let (code, err) = smp(root, c, &[]);
        if code != 0 {
            return Err(format!("{c} exited with {code}: {err}"));
        }
    }
    Ok(())
}

/// Relative path → contents of every file below `root`.
pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                out.insert(p.strip_prefix(base).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}
