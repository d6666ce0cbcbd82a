//! Helpers shared by the command-line test targets.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dsd_core::dataset::DatasetManifest;

pub fn dsd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsd")).args(args).output().expect("spawn dsd")
}

pub fn dsd_ok(args: &[&str]) -> String {
    let out = dsd(args);
    assert!(
        out.status.success(),
        "dsd {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn write_json(path: &Path, value: &serde_json::Value) {
    fs::write(path, serde_json::to_vec_pretty(value).unwrap()).unwrap();
}

/// Writes a small desk-geometry manifest and generates its dataset under
/// `dir/data`. Returns the dataset directory.
pub fn toy_dataset(dir: &Path, train: usize, rate: f64) -> PathBuf {
    let manifest = DatasetManifest::desk(train, 16, 96, rate, 5);
    let m = dir.join("manifest.json");
    manifest.save(&m).unwrap();
    let data = dir.join("data");
    dsd_ok(&["gen-data", "--config", path(&m), "--out", path(&data)]);
    data
}

/// Every file below `root`, keyed by relative path. JSON-lines files lose
/// their `wall_ms` fields, the only timing data any command records.
pub fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
                continue;
            }
            let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            let bytes = fs::read(&p).unwrap();
            let bytes = if rel.ends_with(".jsonl") { strip_timing(&bytes) } else { bytes };
            out.insert(rel, bytes);
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

pub fn strip_timing(jsonl: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    for line in std::str::from_utf8(jsonl).unwrap().lines() {
        let mut v: serde_json::Value = serde_json::from_str(line).unwrap();
        if let Some(o) = v.as_object_mut() {
            o.remove("wall_ms");
        }
        out.extend(serde_json::to_vec(&v).unwrap());
        out.push(b'\n');
    }
    out
}

pub fn read_jsonl(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}
