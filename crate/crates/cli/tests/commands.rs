use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ovrs(args: &[&str], scratch: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ovrs"))
        .args(args)
        .env("OVRS_SCRATCH", scratch)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: [&str; 8] = [
    "--set",
    "synth.image_side=64",
    "--set",
    "synth.num_images=4",
    "--set",
    "synth.num_categories=3",
    "--set",
    "train.image_side=64",
];

fn make_synth(dir: &Path, extra: &[&str]) -> PathBuf {
    let data = dir.join("data");
    let mut args = vec!["make-synth", "--out", s(&data)];
    args.extend(SMALL);
    args.extend(extra);
    ok(&ovrs(&args, dir));
    data.join("manifest.json")
}

fn train(dir: &Path, manifest: &Path, run: &Path, iters: &str, extra: &[&str]) -> Output {
    let iters = format!("train.max_iterations={iters}");
    let mut args = vec!["train", "--manifest", s(manifest), "--out", s(run), "--set", &iters];
    args.extend(SMALL);
    args.extend(["--set", "train.eval_every=5", "--set", "train.checkpoint_every=10"]);
    args.extend(extra);
    ovrs(&args, dir)
}

#[test]
fn synth_train_resume_eval_predict_plot() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = make_synth(d, &["--set", "synth.rotated_val=true"]);
    assert!(d.join("data/config.toml").is_file());

    let run = d.join("run");
    ok(&train(d, &manifest, &run, "20", &["--seed", "3"]));
    assert!(run.join("last.ckpt").is_file());
    assert!(run.join("checkpoints/iter_0000010.ckpt").is_file());
    let snapshot = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(snapshot.contains("max_iterations = 20"));
    assert!(snapshot.contains("seed = 3"));

    let resumed = d.join("resumed");
    let ckpt10 = run.join("checkpoints/iter_0000010.ckpt");
    let out = train(d, &manifest, &resumed, "20", &["--seed", "3", "--checkpoint", s(&ckpt10)]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("resuming at iteration 10"));
    let a = std::fs::read(run.join("last.ckpt")).unwrap();
    let b = std::fs::read(resumed.join("last.ckpt")).unwrap();
    assert!(a == b, "resumed run diverged from the uninterrupted one");

    let ckpt = run.join("last.ckpt");
    let eval_dir = d.join("eval");
    let out = ovrs(
        &["eval", "--manifest", s(&manifest), "--checkpoint", s(&ckpt), "--out", s(&eval_dir)],
        d,
    );
    ok(&out);
    let csv = std::fs::read_to_string(eval_dir.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("scope,class,iou,acc,fwiou,gt_pixels"));
    assert_eq!(csv.lines().count(), 1 + 1 + 3);
    assert!(String::from_utf8_lossy(&out.stdout).contains("mIoU"));

    let image = d.join("data/images/0000.png");
    let pred = d.join("pred");
    let out = ovrs(
        &["predict", "--checkpoint", s(&ckpt), "--image", s(&image), "--out", s(&pred), "--categories", "bar, ellipse"],
        d,
    );
    ok(&out);
    let mask = image::open(pred.join("0000_index.png")).unwrap().to_luma8();
    assert_eq!(mask.dimensions(), (64, 64));
    assert!(mask.pixels().all(|p| p.0[0] < 2));
    assert!(pred.join("0000_color.png").is_file());

    let single = d.join("single");
    ok(&ovrs(
        &["predict", "--checkpoint", s(&ckpt), "--image", s(&image), "--out", s(&single), "--categories", "road"],
        d,
    ));
    let mask = image::open(single.join("0000_index.png")).unwrap().to_luma8();
    assert!(mask.pixels().all(|p| p.0[0] == 0));

    let plots = d.join("plots");
    ok(&ovrs(&["plot-metrics", s(&run), s(&resumed), "--out", s(&plots)], d));
    let metrics = std::fs::read_to_string(plots.join("metrics.csv")).unwrap();
    let log = std::fs::read_to_string(run.join("run_log.jsonl")).unwrap();
    let log2 = std::fs::read_to_string(resumed.join("run_log.jsonl")).unwrap();
    let evals = log.lines().chain(log2.lines()).filter(|l| l.contains("\"kind\":\"eval\"")).count();
    assert_eq!(metrics.lines().count() - 1, evals);
    assert!(evals > 0);
    let svg = std::fs::read_to_string(plots.join("loss.svg")).unwrap();
    assert!(svg.contains("<svg"));
    assert!(plots.join("miou.svg").is_file());
}

#[test]
fn default_model_trains_200_iterations_on_synthetic_data() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = make_synth(d, &[]);
    let run = d.join("run");
    ok(&train(d, &manifest, &run, "200", &[]));
    let log = std::fs::read_to_string(run.join("run_log.jsonl")).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains("\"kind\":\"step\"")).count(), 200);
    assert!(run.join("last.ckpt").is_file());
}

#[test]
fn oracle_predictions_score_100() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = make_synth(d, &["--set", "synth.rotated_val=true"]);
    let preds = d.join("oracle");
    std::fs::create_dir_all(&preds).unwrap();
    for e in std::fs::read_dir(d.join("data/masks")).unwrap() {
        let p = e.unwrap().path();
        std::fs::copy(&p, preds.join(p.file_name().unwrap())).unwrap();
    }
    let out_dir = d.join("eval");
    let out = ovrs(
        &["eval", "--manifest", s(&manifest), "--predictions", s(&preds), "--out", s(&out_dir)],
        d,
    );
    ok(&out);
    let csv = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    let overall = csv.lines().nth(1).unwrap();
    assert!(overall.starts_with("overall,,100.00,100.00,100.00"), "{overall}");
}

#[test]
fn usage_errors_exit_2_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = make_synth(d, &[]);
    let run = d.join("bad");
    let out = train(d, &manifest, &run, "5", &["--set", "train.no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!run.exists());

    let out = ovrs(&["eval", "--manifest", s(&manifest), "--predictions", s(d)], d);
    assert_eq!(out.status.code(), Some(2), "train-only dataset has an empty val split");

    let out = ovrs(&["plot-metrics", s(&d.join("nothing"))], d);
    assert_eq!(out.status.code(), Some(2));

    let out = ovrs(&["frobnicate"], d);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn predict_rejects_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = make_synth(d, &[]);
    let run = d.join("run");
    ok(&train(d, &manifest, &run, "1", &[]));
    let ckpt = run.join("last.ckpt");
    let image = d.join("data/images/0000.png");

    let junk = d.join("junk.png");
    std::fs::write(&junk, b"not an image").unwrap();
    let out = ovrs(&["predict", "--checkpoint", s(&ckpt), "--image", s(&junk)], d);
    assert_eq!(out.status.code(), Some(2));

    let out = ovrs(
        &["predict", "--checkpoint", s(&ckpt), "--image", s(&image), "--categories", "a,b,a"],
        d,
    );
    assert_eq!(out.status.code(), Some(2));

    let out = ovrs(&["predict", "--checkpoint", s(&d.join("missing.ckpt")), "--image", s(&image)], d);
    assert_eq!(out.status.code(), Some(1));
}
