#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use srf_cli::config::RunConfig;

pub fn srf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srf"))
        .args(args)
        .output()
        .expect("the srf binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

/// Runs `srf` and expects success.
pub fn srf_ok(args: &[&str]) -> String {
    let o = srf(args);
    assert!(o.status.success(), "srf {args:?} failed:\n{}", stderr(&o));
    stdout(&o)
}

/// Value of a `key: value` line.
pub fn field(report: &str, key: &str) -> String {
    report
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .unwrap_or_else(|| panic!("no {key} in\n{report}"))
        .to_owned()
}

pub fn layer(in_height: usize, in_depth: usize, height: usize, depth: usize, method: &str) -> Value {
    json!({
        "in_height": in_height, "in_depth": in_depth, "height": height, "depth": depth,
        "window": { "left": 1, "right": 1 }, "iterations": 1, "method": method
    })
}

/// A small synthetic run that trains in well under a second per epoch.
pub fn tiny_config(out: &Path, method: &str) -> Value {
    json!({
        "version": 1,
        "seed": 9,
        "model": {
            "capsulation": {
                "input_dim": 8,
                "conv": [
                    { "kernel": [3, 3], "channels": 3, "stride": [2, 2] },
                    { "kernel": [3, 3], "channels": 3, "stride": [2, 2] }
                ],
                "dropout": 0.1,
                "height": 6,
                "depth": 3
            },
            "layers": [layer(6, 3, 5, 3, method), layer(5, 3, 4, 2, method)],
            "output_scale": 5.0
        },
        "alphabet": { "symbols": ["_", "a", "b", "c"] },
        "train": {
            "warmup_steps": 5,
            "kappa": [{ "after_epochs": 0, "value": 0.3 }],
            "batch_frames": 300,
            "epochs": 2,
            "average_last": 2
        },
        "data": {
            "synthetic": {
                "generator": { "symbols": 3, "feature_dim": 8, "glyph_frames": 8, "glyphs": [1, 3] },
                "train": 18,
                "valid": 6,
                "test": 6
            }
        },
        "output_dir": out
    })
}

pub fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

pub fn load(path: &Path) -> RunConfig {
    RunConfig::load(path, &[]).unwrap()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
