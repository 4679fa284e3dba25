#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn swinca(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_swinca")).args(args).output().expect("spawn swinca")
}

/// Run and require a specific exit code, showing stderr on mismatch.
pub fn expect_code(args: &[&str], code: i32) -> Output {
    let out = swinca(args);
    assert_eq!(
        out.status.code(),
        Some(code),
        "swinca {}\nstderr:\n{}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn ok(args: &[&str]) -> Output {
    expect_code(args, 0)
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

pub fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

pub fn synth(out: &Path, n: usize, size: usize, seed: u64) {
    ok(&["synth", "--out", s(out), "--n", &n.to_string(), "--size", &size.to_string(), "--seed", &seed.to_string()]);
}

pub fn train(corpus: &Path, out: &Path, config: &Path) {
    ok(&["train", "--corpus", s(corpus), "--out", s(out), "--config", s(config)]);
}

pub fn eval(corpus: &Path, ckpt: &Path, out: &Path, config: &Path, subset: &str) -> Output {
    ok(&["eval", "--corpus", s(corpus), "--checkpoint", s(ckpt), "--out", s(out), "--config", s(config), "--subset", subset])
}

/// `(region, [dsc, accuracy, iou, bf_score])` rows of a metrics CSV.
pub fn metric_rows(csv: &str) -> Vec<(String, Vec<f64>)> {
    csv.lines()
        .skip(1)
        .map(|l| {
            let mut f = l.split(',');
            let region = f.next().unwrap().to_string();
            (region, f.map(|v| v.parse().unwrap()).collect())
        })
        .collect()
}

pub fn lesion_dsc(metrics_dir: &Path) -> f64 {
    let csv = std::fs::read_to_string(metrics_dir.join("metrics.csv")).unwrap();
    let rows = metric_rows(&csv);
    rows.iter().find(|(r, _)| r == "lesion").expect("lesion row").1[0]
}

/// Per-image `(id, [tp, fp, fn, tn])` from `per_image.csv`.
pub fn per_image_counts(metrics_dir: &Path) -> Vec<(String, [u64; 4])> {
    std::fs::read_to_string(metrics_dir.join("per_image.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), [1, 2, 3, 4].map(|i| f[i].parse().unwrap()))
        })
        .collect()
}

pub fn predict(ckpt: &Path, out: &Path, config: &Path, images: &[PathBuf], code: i32) -> Output {
    let mut args = vec!["predict", "--checkpoint", s(ckpt), "--out", s(out), "--config", s(config)];
    args.extend(images.iter().map(|p| s(p)));
    expect_code(&args, code)
}
