use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cellshot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cellshot"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let cfg = r#"{
        "seeds": [3],
        "k_grid": [1, 2],
        "ablation_k": [1],
        "n_source_train": 3,
        "n_target_train": 3,
        "n_test": 2,
        "model": {"levels": 1, "base_channels": 4},
        "pretrain": {"epochs": 1, "lr": 0.01, "patch": 32},
        "schedule": {"phase1_epochs": 1, "phase2_epochs": 1},
        "adapt": {"pixels_per_pair": 32, "pairs_per_class": 32}
    }"#;
    let path = dir.join("tiny.json");
    fs::write(&path, cfg).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_with_2() {
    assert_eq!(cellshot(&[]).status.code(), Some(2));
    assert_eq!(cellshot(&["synth", "--bogus"]).status.code(), Some(2));
    assert_eq!(cellshot(&["frobnicate"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    let out = cellshot(&["synth", "--config", p(&bad), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let out = cellshot(&["synth", "--domain", "plasma", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(cellshot(&["synth"]).status.code(), Some(2));
    assert_eq!(cellshot(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing-here");
    let out = cellshot(&["targets", "--data", p(&missing), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}

#[test]
fn synth_is_deterministic_and_eval_of_ground_truth_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = cellshot(&["synth", "--domain", "fluor", "--n", "3", "--seed", "9", "--out", p(d)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["manifest.json", "img_0000.pgm", "msk_0002.pgm"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let t = dir.path().join("t");
    assert!(cellshot(&["targets", "--data", p(&a), "--out", p(&t)]).status.success());
    assert!(t.join("tgt_0002.madc").exists());

    let ev = dir.path().join("ev");
    let out = cellshot(&["eval", "--gt", p(&a), "--pred", p(&a), "--out", p(&ev)]);
    assert!(out.status.success());
    let csv = fs::read_to_string(ev.join("eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",1.000000")), "{csv}");
}

#[test]
fn pretrain_adapt_segment_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (src, tgt) = (dir.path().join("src"), dir.path().join("tgt"));
    assert!(cellshot(&["synth", "--domain", "phase", "--n", "3", "--out", p(&src)]).status.success());
    assert!(cellshot(&["synth", "--domain", "fluor", "--n", "3", "--out", p(&tgt)]).status.success());

    let pre = dir.path().join("pre");
    let out = cellshot(&["pretrain", "--config", &cfg, "--data", p(&src), "--out", p(&pre)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(pre.join("pretrain_log.csv")).unwrap().lines().count(), 2);
    let ckpt = pre.join("model.madc");

    let ad = dir.path().join("ad");
    let out = cellshot(&[
        "adapt", "--config", &cfg, "--checkpoint", p(&ckpt), "--source", p(&src), "--target", p(&tgt),
        "--k", "1", "--out", p(&ad),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ad.join("adapted.madc").exists());
    let log = fs::read_to_string(ad.join("adapt_log.csv")).unwrap();
    assert!(log.starts_with("phase,epoch,loss"));
    let out = cellshot(&[
        "adapt", "--checkpoint", p(&ckpt), "--source", p(&src), "--target", p(&tgt), "--variant", "UB",
        "--out", p(&ad),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let seg = dir.path().join("seg");
    let out = cellshot(&["segment", "--config", &cfg, "--checkpoint", p(&ckpt), "--images", p(&tgt), "--out", p(&seg)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ppm = fs::read(seg.join("ovl_0001.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n64 64\n255\n"));
    let seg2 = dir.path().join("seg2");
    cellshot(&["segment", "--config", &cfg, "--checkpoint", p(&ckpt), "--images", p(&tgt), "--out", p(&seg2), "--threads", "1"]);
    for name in ["msk_0000.pgm", "ovl_0002.ppm"] {
        assert_eq!(fs::read(seg.join(name)).unwrap(), fs::read(seg2.join(name)).unwrap());
    }
    let out = cellshot(&["eval", "--gt", p(&tgt), "--pred", p(&seg)]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("mean AP"));
}

#[test]
fn experiment_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let ex = dir.path().join("ex");
    let out = cellshot(&["experiment", "--config", &cfg, "--out", p(&ex)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(ex.join("results.csv")).unwrap();
    assert!(csv.starts_with("variant,K,seed,mean_ap,pooled_ap,wall_seconds\n"));
    assert_eq!(csv.lines().count(), 1 + 4 * 2 + 3);
    assert!(fs::read_to_string(ex.join("ap_vs_k.svg")).unwrap().starts_with("<svg"));

    let rep = dir.path().join("rep");
    let out = cellshot(&["report", "--results", p(&ex.join("results.csv")), "--out", p(&rep)]);
    assert!(out.status.success());
    let md = fs::read_to_string(rep.join("summary.md")).unwrap();
    assert!(md.contains("## Trend checks") && md.contains("| ADAPT |"));
    assert_eq!(md, fs::read_to_string(ex.join("summary.md")).unwrap());
}
