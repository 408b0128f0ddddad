//! End-to-end checks of the command-line interface.

use std::path::Path;
use std::process::{Command, Output};

fn dafe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dafe"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn path_str(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn unknown_flag_prints_usage_and_fails() {
    let out = dafe(&["--definitely-not-a-flag", "gradcheck"]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("Usage"), "{err}");
}

#[test]
fn missing_input_fails_with_one_line_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dafe(&[
        "eval",
        "--dets",
        "/definitely/missing.jsonl",
        "--annots",
        "/also/missing.txt",
        "--out",
        &path_str(&dir.path().join("r")),
    ]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.starts_with("error:"), "{err}");
}

#[test]
fn gen_synth_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let res = dafe(&[
            "--seed",
            "9",
            "gen-synth",
            "--out",
            &path_str(out),
            "--num-images",
            "3",
            "--width",
            "64",
            "--height",
            "64",
        ]);
        assert!(res.status.success(), "{}", stderr(&res));
    }
    let ann_a = std::fs::read(a.join("annotations.txt")).unwrap();
    let ann_b = std::fs::read(b.join("annotations.txt")).unwrap();
    assert_eq!(ann_a, ann_b);
    let img_a = std::fs::read(a.join("img_0000.pgm")).unwrap();
    let img_b = std::fs::read(b.join("img_0000.pgm")).unwrap();
    assert_eq!(img_a, img_b);
}

#[test]
fn eval_writes_ap_pr_and_svg() {
    let dir = tempfile::tempdir().unwrap();
    let annots = dir.path().join("annots.txt");
    std::fs::write(
        &annots,
        "img_0.pgm\n2\n10 10 20 20 0 0 0 0 0 0\n40 40 10 10 0 0 0 0 0 0\nimg_1.pgm\n1\n5 5 12 12 0 0 0 0 0 0\n",
    )
    .unwrap();
    let dets = dir.path().join("dets.jsonl");
    std::fs::write(
        &dets,
        concat!(
            "{\"image\":\"img_0.pgm\",\"x1\":10.0,\"y1\":10.0,\"x2\":30.0,\"y2\":30.0,\"score\":0.9,\"detector\":1}\n",
            "{\"image\":\"img_0.pgm\",\"x1\":40.0,\"y1\":40.0,\"x2\":50.0,\"y2\":50.0,\"score\":0.8,\"detector\":1}\n",
            "{\"image\":\"img_1.pgm\",\"x1\":5.0,\"y1\":5.0,\"x2\":17.0,\"y2\":17.0,\"score\":0.7,\"detector\":2}\n",
        ),
    )
    .unwrap();
    let out_dir = dir.path().join("results");
    let out = dafe(&[
        "eval",
        "--dets",
        &path_str(&dets),
        "--annots",
        &path_str(&annots),
        "--out",
        &path_str(&out_dir),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));

    let ap_txt = std::fs::read_to_string(out_dir.join("ap.txt")).unwrap();
    assert!(ap_txt.starts_with("ap 1\n"), "{ap_txt}");
    assert!(ap_txt.contains("num_gt 3"), "{ap_txt}");

    let pr = std::fs::read_to_string(out_dir.join("pr.csv")).unwrap();
    assert!(pr.starts_with("recall,precision,score_threshold\n"), "{pr}");
    assert_eq!(pr.lines().count(), 4, "{pr}");

    let svg = std::fs::read_to_string(out_dir.join("pr.svg")).unwrap();
    assert!(svg.contains("<svg"), "{svg}");
    assert!(svg.contains("polyline"), "{svg}");
    assert!(stdout(&out).contains("AP@0.5"));
}

#[test]
fn density_emits_pgm_without_a_model() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let res = dafe(&[
        "--seed",
        "3",
        "gen-synth",
        "--out",
        &path_str(&corpus),
        "--num-images",
        "1",
        "--width",
        "64",
        "--height",
        "64",
    ]);
    assert!(res.status.success(), "{}", stderr(&res));

    let den = dir.path().join("den.pgm");
    let out = dafe(&[
        "density",
        "--annots",
        &path_str(&corpus.join("annotations.txt")),
        "--image",
        &path_str(&corpus.join("img_0000.pgm")),
        "--out",
        &path_str(&den),
        "--sigma",
        "fixed:4",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let bytes = std::fs::read(&den).unwrap();
    assert!(bytes.starts_with(b"P5"), "density output must be a PGM");
    let text = stdout(&out);
    assert!(text.contains("16x16"), "64px image at stride 4: {text}");

    let bad = dafe(&[
        "density",
        "--annots",
        &path_str(&corpus.join("annotations.txt")),
        "--image",
        &path_str(&corpus.join("img_0000.pgm")),
        "--out",
        &path_str(&den),
        "--sigma",
        "gaussian:oops",
    ]);
    assert!(!bad.status.success());
    assert!(stderr(&bad).contains("sigma"), "{}", stderr(&bad));
}

#[test]
fn gradcheck_exits_zero_when_all_ops_pass() {
    let out = dafe(&["--seed", "7", "gradcheck"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("PASS pipeline_multitask_loss"), "{text}");
    assert!(!text.contains("FAIL"), "{text}");
}

#[test]
fn train_detect_eval_round_trip_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let res = dafe(&[
        "--seed",
        "5",
        "gen-synth",
        "--out",
        &path_str(&corpus),
        "--num-images",
        "2",
        "--width",
        "64",
        "--height",
        "64",
        "--max-faces",
        "3",
    ]);
    assert!(res.status.success(), "{}", stderr(&res));

    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(
        &cfg,
        "backbone.widths = 2,3,4,5,5\nbackbone.convs_per_block = 1\n\
         estimator.reduce_channels = 2\nestimator.conv_channels = 2\n\
         pyramid.channels = 6\ncontext.dilations = 1,2\ncontext.branch_width = 3\n\
         sgd.base_lr = 0.01\nsgd.milestones = 8\ntrain.iterations = 10\n",
    )
    .unwrap();
    let run_dir = dir.path().join("run");
    let annots = path_str(&corpus.join("annotations.txt"));
    let out = dafe(&[
        "--config",
        &path_str(&cfg),
        "--seed",
        "2",
        "train",
        "--annots",
        &annots,
        "--out",
        &path_str(&run_dir),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(run_dir.join("trace.csv").exists());
    assert!(run_dir.join("model_iter00008.bin").exists());
    let model = run_dir.join("model_final.bin");
    assert!(model.exists());

    let dets_a = dir.path().join("a.jsonl");
    let dets_b = dir.path().join("b.jsonl");
    for dets in [&dets_a, &dets_b] {
        let out = dafe(&[
            "detect",
            "--model",
            &path_str(&model),
            "--annots",
            &annots,
            "--out",
            &path_str(dets),
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    assert_eq!(
        std::fs::read(&dets_a).unwrap(),
        std::fs::read(&dets_b).unwrap(),
        "detection from a loaded model must be bit-stable"
    );

    let eval_dir = dir.path().join("eval");
    let out = dafe(&[
        "eval",
        "--dets",
        &path_str(&dets_a),
        "--annots",
        &annots,
        "--out",
        &path_str(&eval_dir),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let ap_txt = std::fs::read_to_string(eval_dir.join("ap.txt")).unwrap();
    let ap: f64 = ap_txt
        .lines()
        .next()
        .unwrap()
        .strip_prefix("ap ")
        .unwrap()
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&ap));
}

#[test]
fn anchor_stats_reports_distribution() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let res = dafe(&[
        "--seed",
        "13",
        "gen-synth",
        "--out",
        &path_str(&corpus),
        "--num-images",
        "2",
        "--width",
        "64",
        "--height",
        "64",
    ]);
    assert!(res.status.success(), "{}", stderr(&res));
    let report = dir.path().join("stats.txt");
    let out = dafe(&[
        "anchor-stats",
        "--annots",
        &path_str(&corpus.join("annotations.txt")),
        "--out",
        &path_str(&report),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.contains("mean_max_iou"), "{text}");
    assert!(text.contains("fraction_below_0.5"), "{text}");
    assert_eq!(stdout(&out), text, "stdout and report must match");
}
