//! End-to-end runs of the `hnet` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hnet")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

fn params_total(mode: &str) -> usize {
    let out = hnet(&["params", "--mode", mode]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    let line = text.lines().find(|l| l.starts_with("total")).unwrap();
    line.split_whitespace().nth(1).unwrap().parse().unwrap()
}

#[test]
fn gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("scene");
    let o = out.to_str().unwrap();
    assert_eq!(code(&hnet(&["gen", "--seed", "4", "--out", o])), 0);
    let first = files(&out);
    let names: Vec<_> = first.iter().map(|(n, _)| n.as_str()).collect();
    for want in ["left.ppm", "right.ppm", "gt_depth.f32", "gt_disparity.f32", "occlusion.f32", "scene.toml"] {
        assert!(names.contains(&want), "missing {want} in {names:?}");
    }
    assert_eq!(code(&hnet(&["gen", "--seed", "4", "--out", o])), 0);
    assert_eq!(first, files(&out));

    let other = dir.path().join("other");
    assert_eq!(code(&hnet(&["gen", "--seed", "5", "--out", other.to_str().unwrap()])), 0);
    assert_ne!(fs::read(out.join("left.ppm")).unwrap(), fs::read(other.join("left.ppm")).unwrap());
}

#[test]
fn validation_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("s");
    assert_eq!(code(&hnet(&["gen", "--preset", "three-plane", "--out", o.to_str().unwrap()])), 1);
    assert_eq!(code(&hnet(&["gen", "--height", "0", "--out", o.to_str().unwrap()])), 1);
    assert_eq!(code(&hnet(&["frobnicate"])), 1);
    assert_eq!(code(&hnet(&["params", "--mode", "sideways"])), 1);
    let missing = dir.path().join("none.ckpt");
    let args = ["infer", "--checkpoint", missing.to_str().unwrap(), "--scene", "x", "--out", "y"];
    assert_eq!(code(&hnet(&args)), 1);
    assert_eq!(code(&hnet(&["--help"])), 0);
}

#[test]
fn params_increment_matches_closed_form() {
    // toy widths 8, 16, 32: encoder sites at every stage, decoder sites 32, 16, 8
    let sites = [8usize, 16, 32, 32, 16, 8];
    let eg: usize = sites.iter().map(|c| 3 * (c * c + c)).sum();
    let ot: usize = sites.iter().map(|c| 3 * (c * c + c) + 2 * (c + 1)).sum();
    let off = params_total("off");
    assert_eq!(params_total("ot-mea") - off, ot);
    assert_eq!(params_total("ot-mnl") - off, ot);
    assert_eq!(params_total("eg-mea") - off, eg);
}

#[test]
fn gradcheck_passes() {
    let out = hnet(&["gradcheck", "--seeds", "1"]);
    let text = stdout(&out);
    assert_eq!(code(&out), 0, "{text}");
    assert!(text.contains("worst relative error"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn train_infer_eval_round() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    assert_eq!(code(&hnet(&["gen", "--seed", "1", "--out", &p("scene")])), 0);
    let out = hnet(&["train", "--steps", "2", "--mode", "eg-mea", "--out", &p("run")]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let log = fs::read_to_string(dir.path().join("run/loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(dir.path().join("run/train.toml").exists());

    let ckpt = p("run/model.ckpt");
    assert_eq!(code(&hnet(&["infer", "--checkpoint", &ckpt, "--scene", &p("scene"), "--out", &p("pred")])), 0);
    for f in ["depth_left.f32", "depth_right.f32", "depth_left.pgm", "depth_right.pgm"] {
        assert!(dir.path().join("pred").join(f).exists(), "missing {f}");
    }
    let out = hnet(&["eval", "--checkpoint", &ckpt, "--scene", &p("scene"), "--out", &p("eval")]);
    assert_eq!(code(&out), 0);
    let csv = fs::read_to_string(dir.path().join("eval/metrics.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), hnet::metrics::CSV_HEADER);
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn divergence_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = hnet(&["train", "--steps", "3", "--lr", "1e300", "--mode", "off", "--out", run.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}
