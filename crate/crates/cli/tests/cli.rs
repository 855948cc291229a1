use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dcrf::data::{read_pgm, read_ppm, Manifest, Split};
use dcrf::learning::unary_scores;
use dcrf::{accumulate, argmax_labeling, mean_iou, softmax_normalize, ConfusionMatrix};
use dcrf_cli::train::{BEST_CHECKPOINT, LAST_CHECKPOINT};
use dcrf_cli::{Checkpoint, Stage};

fn dcrf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcrf"))
        .args(args)
        .env("DCRF_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit status")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, train: usize, val: usize, size: usize, noise: f64) -> PathBuf {
    let data = dir.join("data");
    let out = dcrf(&[
        "synth", "--out", s(&data), "--train", &train.to_string(), "--val", &val.to_string(),
        "--size", &size.to_string(), "--labels", "4", "--noise", &noise.to_string(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    data
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

const SMALL: &str = r#"
labels = 4
unary = "linear"

[crf]
iterations = 3

[training]
epochs = EPOCHS
batch_size = 3
seed = 5
"#;

fn small_config(dir: &Path, name: &str, epochs: usize) -> PathBuf {
    write_config(dir, name, &SMALL.replace("EPOCHS", &epochs.to_string()))
}

fn train(config: &Path, data: &Path, out: &Path, stage: &str, resume: Option<&Path>) -> Output {
    let (tr, va) = (data.join("train.tsv"), data.join("val.tsv"));
    let mut args = vec![
        "train", "--config", s(config), "--data", s(&tr), "--val", s(&va), "--out", s(out),
        "--stage", stage,
    ];
    if let Some(r) = resume {
        args.extend(["--resume", s(r)]);
    }
    let o = dcrf(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    o
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&dcrf(&[])), 1);
    assert_eq!(code(&dcrf(&["frobnicate"])), 1);
    assert_eq!(code(&dcrf(&["bench-filter", "--reps", "1"])), 1);
    let data = synth(dir.path(), 3, 2, 16, 10.0);
    let bad = write_config(dir.path(), "bad.toml", "labels = 4\nlearning_rate = 3\n");
    let out = dcrf(&[
        "train", "--config", s(&bad), "--data", s(&data.join("train.tsv")), "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(code(&out), 1);
    let threads = Command::new(env!("CARGO_BIN_EXE_dcrf"))
        .args(["bench-filter", "8", "--reps", "1"])
        .env("DCRF_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&threads), 1);
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "c.toml", 1);
    let missing = dir.path().join("nope.tsv");
    let out = dcrf(&["train", "--config", s(&cfg), "--data", s(&missing), "--out", s(dir.path())]);
    assert_eq!(code(&out), 2);

    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"DCRF\x01\x00\x00\x00garbage").unwrap();
    let img = dir.path().join("x.ppm");
    std::fs::write(&img, b"P6\n1 1\n255\n\x00\x00\x00").unwrap();
    let out = dcrf(&["infer", "--checkpoint", s(&junk), "--image", s(&img), "--out", s(&img)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("junk.ckpt"));
}

#[test]
fn zero_epochs_writes_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 4, 2, 16, 10.0);
    let cfg = small_config(dir.path(), "c.toml", 0);
    let out = dir.path().join("run");
    train(&cfg, &data, &out, "unary", None);
    let names: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(names, vec![LAST_CHECKPOINT.to_string()]);
    let ckpt = Checkpoint::load(&out.join(LAST_CHECKPOINT)).unwrap();
    assert_eq!((ckpt.stage, ckpt.epoch, ckpt.step), (Stage::Unary, 0, 0));
}

#[test]
fn joint_stage_starts_from_the_unary_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 6, 3, 16, 10.0);
    let unary_out = dir.path().join("unary");
    train(&small_config(dir.path(), "u.toml", 2), &data, &unary_out, "unary", None);
    let unary = Checkpoint::load(&unary_out.join(LAST_CHECKPOINT)).unwrap();
    assert_eq!((unary.stage, unary.epoch, unary.step), (Stage::Unary, 2, 4));

    let joint_out = dir.path().join("joint");
    let cfg = small_config(dir.path(), "j.toml", 0);
    train(&cfg, &data, &joint_out, "joint", Some(&unary_out.join(LAST_CHECKPOINT)));
    let joint = Checkpoint::load(&joint_out.join(LAST_CHECKPOINT)).unwrap();
    assert_eq!(joint.stage, Stage::Joint);
    assert_eq!(joint.epoch, 0);
    assert_eq!(joint.step, 4);
    assert_eq!(joint.unary, unary.unary);
    assert_eq!(joint.model, unary.model);
    assert!(joint.uses_crf());
}

#[test]
fn resuming_a_stage_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 6, 3, 16, 10.0);
    let whole = dir.path().join("whole");
    train(&small_config(dir.path(), "two.toml", 2), &data, &whole, "joint", None);

    let split = dir.path().join("split");
    train(&small_config(dir.path(), "one.toml", 1), &data, &split, "joint", None);
    train(
        &small_config(dir.path(), "two.toml", 2),
        &data,
        &split,
        "joint",
        Some(&split.join(LAST_CHECKPOINT)),
    );
    for name in [LAST_CHECKPOINT, "log_joint.csv"] {
        assert!(read(&whole.join(name)) == read(&split.join(name)), "{name} differs");
    }
    let log = String::from_utf8(read(&whole.join("log_joint.csv"))).unwrap();
    assert_eq!(log.lines().next().unwrap(), "epoch,train_loss,val_loss,val_miou,skipped_steps");
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn training_is_bitwise_reproducible_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 6, 3, 16, 10.0);
    let cfg = small_config(dir.path(), "c.toml", 2);
    let mut outputs = Vec::new();
    for (k, threads) in ["1", "3"].iter().enumerate() {
        let out = dir.path().join(format!("run{k}"));
        let o = Command::new(env!("CARGO_BIN_EXE_dcrf"))
            .args([
                "train", "--config", s(&cfg), "--data", s(&data.join("train.tsv")), "--val",
                s(&data.join("val.tsv")), "--out", s(&out), "--stage", "joint",
            ])
            .env("DCRF_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(code(&o), 0);
        outputs.push(out);
    }
    for name in [LAST_CHECKPOINT, BEST_CHECKPOINT, "log_joint.csv"] {
        assert!(read(&outputs[0].join(name)) == read(&outputs[1].join(name)), "{name} differs");
    }
}

#[test]
fn inference_outputs_are_deterministic_and_well_formed() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 4, 2, 16, 10.0);
    let out = dir.path().join("run");
    train(&small_config(dir.path(), "c.toml", 1), &data, &out, "joint", None);
    let (image, _) = Manifest::load(data.join("val.tsv"), Split::Val).unwrap().paths(0);
    let ckpt = out.join(LAST_CHECKPOINT);
    let mut files = Vec::new();
    for k in 0..2 {
        let prefix = dir.path().join(format!("pred{k}"));
        let o = dcrf(&["infer", "--checkpoint", s(&ckpt), "--image", s(&image), "--out", s(&prefix)]);
        assert_eq!(code(&o), 0);
        files.push(
            ["_labels.pgm", "_confidence.pgm", "_overlay.ppm"]
                .map(|suffix| read(Path::new(&format!("{}{suffix}", prefix.display())))),
        );
    }
    assert!(files[0] == files[1]);
    let labels = read_pgm(&dir.path().join("pred0_labels.pgm")).unwrap();
    assert!(labels.labels().iter().all(|&l| l < 4));
    let confidence = read_pgm(&dir.path().join("pred0_confidence.pgm")).unwrap();
    assert!(confidence.labels().iter().all(|&c| c >= 64));
    let overlay = read_ppm(&dir.path().join("pred0_overlay.ppm")).unwrap();
    assert_eq!((overlay.width(), overlay.height()), (16, 16));
}

#[test]
fn unary_stage_inference_is_the_unary_argmax() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 4, 2, 16, 25.0);
    let out = dir.path().join("run");
    train(&small_config(dir.path(), "c.toml", 2), &data, &out, "unary", None);
    let ckpt = Checkpoint::load(&out.join(LAST_CHECKPOINT)).unwrap();
    assert!(!ckpt.uses_crf());
    let (image, _) = Manifest::load(data.join("val.tsv"), Split::Val).unwrap().paths(1);
    let prefix = dir.path().join("p");
    let o = dcrf(&[
        "infer", "--checkpoint", s(&out.join(LAST_CHECKPOINT)), "--image", s(&image), "--out",
        s(&prefix),
    ]);
    assert_eq!(code(&o), 0);
    let img = read_ppm(&image).unwrap();
    let expected = argmax_labeling(&softmax_normalize(&unary_scores(&ckpt.unary, &img).unwrap()).unwrap());
    assert_eq!(read_pgm(&dir.path().join("p_labels.pgm")).unwrap(), expected);
}

#[test]
fn noiseless_training_images_are_segmented_accurately() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 20, 4, 24, 0.0);
    let cfg = write_config(
        dir.path(),
        "c.toml",
        "labels = 4\nunary = \"linear\"\n[optimizer]\nlr_top = 0.1\n[training]\nepochs = 150\nbatch_size = 5\n",
    );
    let out = dir.path().join("run");
    train(&cfg, &data, &out, "unary", None);
    let manifest = Manifest::load(data.join("train.tsv"), Split::Train).unwrap();
    let (image, gt) = manifest.paths(0);
    let prefix = dir.path().join("p");
    let o = dcrf(&[
        "infer", "--checkpoint", s(&out.join(LAST_CHECKPOINT)), "--image", s(&image), "--out",
        s(&prefix),
    ]);
    assert_eq!(code(&o), 0);
    let mut cm = ConfusionMatrix::new(4);
    let pred = read_pgm(&dir.path().join("p_labels.pgm")).unwrap();
    accumulate(&mut cm, &read_pgm(&gt).unwrap(), &pred).unwrap();
    let miou = mean_iou(&cm).unwrap();
    assert!(miou >= 0.9, "mIoU {miou}");

    let csv = dcrf(&["eval", "--checkpoint", s(&out.join(LAST_CHECKPOINT)), "--data", s(&data.join("train.tsv"))]);
    assert_eq!(code(&csv), 0);
    let text = String::from_utf8(csv.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "class_id,class_name,iou");
    assert_eq!(lines.len(), 6);
    assert!(lines[1].starts_with("0,label_0,"));
    let mean: f64 = lines[5].strip_prefix("mean,,").unwrap().parse().unwrap();
    assert!(mean >= 0.9, "dataset mIoU {mean}");
}

#[test]
fn gradcheck_default_config_passes() {
    let out = dcrf(&["gradcheck", "--stride", "3"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(code(&out), 0, "{text}");
    assert!(text.contains(" 0 failures"), "{text}");
    for group in ["body", "top", "crf_weight", "crf_sigma"] {
        assert!(text.lines().any(|l| l.starts_with(group)), "{group} missing:\n{text}");
    }
}

#[test]
fn bench_filter_reports_both_modes() {
    let out = dcrf(&["bench-filter", "64", "128", "--reps", "1"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    let total = |size: &str, mode: &str| -> f64 {
        rows.iter().find(|r| r[0] == size && r[2] == mode).unwrap()[5].parse().unwrap()
    };
    assert!(total("128", "lattice") < total("128", "brute"));
}
