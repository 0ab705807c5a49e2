use std::path::Path;
use std::process::{Command, Output};

use uncertflow::io::{read_flo, read_matches, read_pfm, read_sample, sample_dir_name};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uncertflow"))
        .args(args)
        .env_remove("UNCERTFLOW_THREADS")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A tiny dataset plus a briefly trained checkpoint.
fn fixture(dir: &Path) {
    let data = dir.join("data");
    let ckpt = dir.join("model.ckpt");
    let size = ["--set", "width=32", "--set", "height=32", "--set", "margin=8"];
    let mut gen = vec!["gendata", "--out", s(&data), "--count", "4", "--seed", "2"];
    gen.extend(size);
    ok(&gen);
    ok(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&ckpt),
        "--iterations",
        "2",
        "--set",
        "batch_size=2",
        "--set",
        "validation_count=1",
    ]);
}

#[test]
fn error_kinds_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let usage = run(&["train", "--bogus"]);
    assert_eq!(usage.status.code(), Some(2));

    let cfg = run(&["gendata", "--out", s(&dir.path().join("d")), "--set", "not_a_key=1"]);
    assert_eq!(cfg.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&cfg.stderr).starts_with("error kind="));

    let missing = run(&[
        "eval",
        "--pred",
        s(&dir.path().join("nope.flo")),
        "--gt",
        s(&dir.path().join("nope2.flo")),
        "--out",
        s(&dir.path().join("m.csv")),
    ]);
    assert_eq!(missing.status.code(), Some(3));

    let zero = run(&["--threads", "0", "eval", "--pred", "a", "--gt", "b", "--out", "c"]);
    assert_eq!(zero.status.code(), Some(2));
}

#[test]
fn single_pair_inference_and_matching() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let sample = dir.path().join("data").join(sample_dir_name(0));
    let (q, r) = (sample.join("query.ppm"), sample.join("reference.ppm"));
    let ckpt = dir.path().join("model.ckpt");
    let (flo, conf, var) = (dir.path().join("f.flo"), dir.path().join("c.pfm"), dir.path().join("v.pfm"));
    ok(&[
        "infer",
        "--checkpoint",
        s(&ckpt),
        "--mode",
        "h",
        "--query",
        s(&q),
        "--reference",
        s(&r),
        "--out-flow",
        s(&flo),
        "--out-confidence",
        s(&conf),
        "--out-variance",
        s(&var),
    ]);
    let flow = read_flo(&flo).unwrap();
    assert_eq!((flow.width(), flow.height()), (32, 32));
    assert!(read_pfm(&conf).unwrap().data().iter().all(|p| (0.0..=1.0).contains(p)));
    assert!(read_pfm(&var).unwrap().data().iter().all(|v| *v > 0.0));

    let gt = read_sample(&sample).unwrap();
    assert_eq!(gt.flow.width(), 32);
    let csv = dir.path().join("m.csv");
    ok(&["eval", "--pred", s(&flo), "--gt", s(&sample.join("flow.flo")), "--out", s(&csv)]);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("pair,aepe,pck1,pck3,pck5,fl"));

    let (kr, kq) = (dir.path().join("kr.csv"), dir.path().join("kq.csv"));
    std::fs::write(&kr, "x,y\n10,10\n20,12\n").unwrap();
    std::fs::write(&kq, "x,y\n11,10\n21,13\n5,30\n").unwrap();
    let out = dir.path().join("kp.csv");
    ok(&[
        "match",
        "--checkpoint",
        s(&ckpt),
        "--query",
        s(&q),
        "--reference",
        s(&r),
        "--out",
        s(&out),
        "--keypoints-ref",
        s(&kr),
        "--keypoints-query",
        s(&kq),
        "--cyclic",
    ]);
    let matches = read_matches(&out).unwrap();
    assert!(matches.len() <= 2);
    for m in &matches {
        assert!([[10.0, 10.0], [20.0, 12.0]].contains(&m.reference));
    }

    let dense = dir.path().join("dense.csv");
    ok(&["match", "--checkpoint", s(&ckpt), "--query", s(&q), "--reference", s(&r), "--out", s(&dense)]);
    for m in read_matches(&dense).unwrap() {
        assert!((0.0..=1.0).contains(&m.confidence));
    }
}
