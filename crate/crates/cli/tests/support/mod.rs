#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// A small synthetic run that trains in well under a second.
pub const TINY: &str = r#"
seed = 3
precision = "f64"

[dataset]
source = "synthetic"
train_size = 60
val_size = 20
test_size = 40

[dataset.synthetic]
num_classes = 3
shape = [1, 8, 8]
noise = 0.8
max_blend = 0.4
ambiguous_fraction = 0.1
task_seed = 1

[model]
stage_channels = [4, 8]
blocks_per_stage = 1

[train]
epochs = 2
batch_size = 16
lr_drop_epochs = [1]

[eval]
mc_samples = 4
bootstrap_reps = 20

[al]
initial_labeled = 20
acquire_per_round = 10
rounds = 2
repeats = 2
mc_samples = 3
acquisitions = ["max_entropy", "bald", "variation_ratio"]

[sweep]
rates = [0.1, 0.05]
variants = ["element", "layer"]
"#;

/// `TINY` with extra top-level sections or keys appended. Keys that repeat a
/// section of `TINY` must use dotted form, e.g. `dropout.variant = "block"`.
pub fn tiny_with(extra: &str) -> String {
    format!("{extra}\n{TINY}")
}

pub fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

pub fn calidrop(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_calidrop"));
    cmd.args(args).env("RUST_LOG", "warn");
    match threads {
        Some(t) => cmd.env("CALIDROP_THREADS", t),
        None => cmd.env_remove("CALIDROP_THREADS"),
    };
    cmd.output().unwrap()
}

pub fn run_ok(args: &[&str]) {
    let out = calidrop(args, None);
    assert!(
        out.status.success(),
        "calidrop {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// File name to contents for every file in `dir`.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
