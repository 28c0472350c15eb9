#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use advdet::synth::{write_dataset, SynthConfig};

pub const PAPER_GRID: [f64; 9] = [0.0, 0.02, 0.04, 0.05, 0.06, 0.07, 0.08, 0.09, 0.10];

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_advdet")
}

pub fn advdet(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn synth(root: &Path, cfg: &SynthConfig, seed: u64) {
    write_dataset(cfg, root, seed).expect("dataset written");
}

pub fn small_synth() -> SynthConfig {
    SynthConfig {
        num_classes: 2,
        image_size: 16,
        train_per_class: 5,
        val_per_class: 12,
        test_per_class: 6,
        ..SynthConfig::default()
    }
}

/// Desk-scale classification config over `data_root/classification`.
pub fn classification_config(data_root: &Path, out: &Path, extra: &str) -> String {
    format!(
        r#"[experiment]
output_dir = {out:?}
global_seed = 0

[dataset]
root = {root:?}

[preprocess]
crop_size = 32
resize_short = 32

[train]
epochs = 20

{extra}
"#,
        out = out.to_string_lossy(),
        root = data_root.join("classification").to_string_lossy(),
    )
}

pub fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

/// Non-increasing within `slack` per step, and the last value at most
/// `ratio` times the second.
pub fn degrades(values: &[f64], slack: f64, ratio: f64) -> bool {
    values.windows(2).all(|w| w[1] <= w[0] + slack) && values.len() >= 2 && values[values.len() - 1] <= ratio * values[1]
}
