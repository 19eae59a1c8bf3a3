use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ndarray::Array3;
use pipofan::io::{header_with_spacing, write_volume};
use pipofan::synthetic::{generate_shapes, ShapesConfig};

fn pipofan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pipofan"))
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Two single-organ datasets of three-slice shape volumes plus a config
/// for a tiny two-scale network.
fn experiment(dir: &Path, max_steps: usize) -> PathBuf {
    let images = generate_shapes(
        &ShapesConfig {
            images: 4,
            size: 16,
            ..Default::default()
        },
        3,
    );
    let header = header_with_spacing([2.0, 0.8, 0.8]);
    for (name, class, range) in [("disks", 1u8, 0..2), ("squares", 2u8, 2..4)] {
        let mut volumes = String::new();
        for i in range {
            let img = images[i].image.clone().insert_axis(ndarray::Axis(0));
            let image = ndarray::concatenate![ndarray::Axis(0), img, img, img];
            let lab = images[i].labels.mapv(|l| if l == class { 1u8 } else { 0 }).insert_axis(ndarray::Axis(0));
            let labels = ndarray::concatenate![ndarray::Axis(0), lab, lab, lab];
            write_volume(&dir.join(format!("{name}/img{i}.nii")), &image, &header).unwrap();
            write_volume(&dir.join(format!("{name}/lab{i}.nii")), &labels, &header).unwrap();
            volumes.push_str(&format!(
                "[[volumes]]\nid = \"{name}{i}\"\nimage = \"{name}/img{i}.nii\"\nlabel = \"{name}/lab{i}.nii\"\n"
            ));
        }
        let organ = if class == 1 { "liver" } else { "kidney" };
        let manifest = format!("name = \"{name}\"\nclasses = [\"background\", \"{organ}\"]\n{volumes}");
        std::fs::write(dir.join(format!("{name}.toml")), manifest).unwrap();
    }
    let config = format!(
        r#"seed = 9
output_dir = "run"
datasets = ["disks.toml", "squares.toml"]

[preprocess]
resize_to = 16
crop_size = 16
scales = 2

[network]
scales = 2
channels = [4, 6, 4]
block_type = "plain"

[train]
lr0 = 0.001
max_epochs = 50
dps_epochs = 1
batch_size = 2
max_steps = {max_steps}
checkpoint_every = 2
"#
    );
    let path = dir.join("experiment.toml");
    std::fs::write(&path, config).unwrap();
    path
}

#[test]
fn train_writes_checkpoints_and_resumes_identically() {
    let dir = tempfile::tempdir().unwrap();
    let config = experiment(dir.path(), 4);
    let out = pipofan(&["train", "--config", p(&config)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let run = dir.path().join("run");
    assert!(run.join("last.safetensors").is_file());
    assert!(run.join("step_0000002.safetensors").is_file());
    assert!(run.join("config.resolved.toml").is_file());
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);

    std::fs::copy(run.join("step_0000002.safetensors"), dir.path().join("mid.safetensors")).unwrap();
    let out = pipofan(&["train", "--config", p(&config), "--resume", p(&dir.path().join("mid.safetensors"))]);
    assert!(out.status.success(), "{}", stderr(&out));
    let resumed = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(resumed, log);
}

#[test]
fn train_reports_missing_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let config = experiment(dir.path(), 1);
    std::fs::remove_file(dir.path().join("squares.toml")).unwrap();
    let out = pipofan(&["train", "--config", p(&config)]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("squares.toml"), "{}", stderr(&out));
}

#[test]
fn infer_handles_volumes_ensembles_and_failures() {
    let dir = tempfile::tempdir().unwrap();
    let config = experiment(dir.path(), 2);
    assert!(pipofan(&["train", "--config", p(&config)]).status.success());
    let ckpt = dir.path().join("run/last.safetensors");
    let a = dir.path().join("disks/img0.nii");
    let b = dir.path().join("squares/img2.nii");
    let out_dir = dir.path().join("pred");

    let out = pipofan(&["infer", "--checkpoint", p(&ckpt), "--input", p(&a), p(&b), "--output", p(&out_dir)]);
    assert!(out.status.success(), "{}", stderr(&out));
    for name in ["img0.nii", "img0.json", "img2.nii", "img2.json"] {
        assert!(out_dir.join(name).is_file(), "{name} missing");
    }
    let (labels, _) = pipofan::io::read_volume::<u8>(&out_dir.join("img0.nii")).unwrap();
    assert_eq!(labels.dim(), (3, 16, 16));

    let second = dir.path().join("copy.safetensors");
    std::fs::copy(&ckpt, &second).unwrap();
    let refused = pipofan(&["infer", "--checkpoint", p(&ckpt), p(&second), "--input", p(&a), "--output", p(&out_dir)]);
    assert!(!refused.status.success());
    let voted_dir = dir.path().join("voted");
    let out = pipofan(&[
        "infer", "--checkpoint", p(&ckpt), p(&second), "--ensemble", "--input", p(&a), "--output", p(&voted_dir),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let (voted, _) = pipofan::io::read_volume::<u8>(&voted_dir.join("img0.nii")).unwrap();
    assert_eq!(voted, labels);

    let broken = dir.path().join("broken.nii");
    std::fs::write(&broken, b"garbage").unwrap();
    let partial_dir = dir.path().join("partial");
    let out = pipofan(&["infer", "--checkpoint", p(&ckpt), "--input", p(&broken), p(&a), "--output", p(&partial_dir)]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("broken.nii"));
    assert!(partial_dir.join("img0.nii").is_file());

    let rules = dir.path().join("rules.json");
    std::fs::write(&rules, r#"{"budgets": {"9": 1}}"#).unwrap();
    let out = pipofan(&["infer", "--checkpoint", p(&ckpt), "--input", p(&a), "--output", p(&out_dir), "--rules", p(&rules)]);
    assert!(!out.status.success());
}

fn label_dirs(dir: &Path) -> (PathBuf, PathBuf) {
    let truth = dir.join("truth");
    let pred = dir.join("pred");
    let header = header_with_spacing([1.0, 1.0, 1.0]);
    let lab = Array3::from_shape_fn((4, 6, 6), |(z, y, x)| if z > 0 && y < 3 && x < 3 { 1u8 } else if x > 3 { 2 } else { 0 });
    for case in ["c1", "c2"] {
        write_volume(&truth.join(format!("{case}.nii")), &lab, &header).unwrap();
        write_volume(&pred.join(format!("{case}.nii")), &lab, &header).unwrap();
    }
    (pred, truth)
}

#[test]
fn eval_scores_perfect_and_empty_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, truth) = label_dirs(dir.path());
    let report = dir.path().join("metrics.csv");
    let out = pipofan(&["eval", "--pred", p(&pred), "--truth", p(&truth), "--report", p(&report)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let mut rows = csv::Reader::from_path(&report).unwrap();
    let records: Vec<csv::StringRecord> = rows.records().map(Result::unwrap).collect();
    assert!(records.iter().all(|r| r[2].parse::<f64>().unwrap() == 1.0));
    let liver_c1 = records.iter().find(|r| &r[0] == "liver" && &r[1] == "c1").unwrap();
    assert_eq!((&liver_c1[3], &liver_c1[4]), ("0.0", "0.0"));

    let header = header_with_spacing([1.0, 1.0, 1.0]);
    write_volume(&pred.join("c2.nii"), &Array3::<u8>::zeros((4, 6, 6)), &header).unwrap();
    let out = pipofan(&["eval", "--pred", p(&pred), "--truth", p(&truth), "--report", p(&report)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let mut rows = csv::Reader::from_path(&report).unwrap();
    let records: Vec<csv::StringRecord> = rows.records().map(Result::unwrap).collect();
    let liver_c2 = records.iter().find(|r| &r[0] == "liver" && &r[1] == "c2").unwrap();
    assert_eq!((&liver_c2[2], &liver_c2[3], &liver_c2[4]), ("0.0", "", ""));
}

#[test]
fn eval_skips_unmatched_cases() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, truth) = label_dirs(dir.path());
    std::fs::rename(pred.join("c2.nii"), pred.join("c3.nii")).unwrap();
    let report = dir.path().join("metrics.csv");
    let out = pipofan(&["eval", "--pred", p(&pred), "--truth", p(&truth), "--report", p(&report)]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("c2, c3"), "{}", stderr(&out));
    assert!(report.is_file());
}

#[test]
fn split_is_balanced_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = String::from("name = \"lits\"\nclasses = [\"background\", \"liver\"]\n");
    for i in 0..131 {
        manifest.push_str(&format!("[[volumes]]\nid = \"v{i:03}\"\nimage = \"v{i:03}.nii\"\n"));
    }
    let path = dir.path().join("lits.toml");
    std::fs::write(&path, manifest).unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    for out in [&a, &b] {
        let o = pipofan(&["split", "--manifest", p(&path), "--k", "5", "--seed", "3", "--out", p(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let plan = pipofan::evaluation::FoldPlan::load(&a).unwrap();
    let mut sizes = plan.sizes();
    sizes.sort_unstable_by(|x, y| y.cmp(x));
    assert_eq!(sizes, vec![27, 26, 26, 26, 26]);
    let single = pipofan(&["split", "--manifest", p(&path), "--k", "1", "--out", p(&a)]);
    assert!(single.status.success());
    assert_eq!(pipofan::evaluation::FoldPlan::load(&a).unwrap().sizes(), vec![131]);
    let too_many = pipofan(&["split", "--manifest", p(&path), "--k", "132", "--out", p(&a)]);
    assert!(!too_many.status.success());
}
