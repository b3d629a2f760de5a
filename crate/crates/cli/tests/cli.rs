use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gaitlab::checkpoint::checkpoint_name;
use gaitlab::dataset::DatasetIndex;
use gaitlab::evaluation::{stub_checkpoint, CONSTANT_KIND, ORACLE_KIND};

fn gaitlab(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gaitlab"));
    cmd.args(args).env_remove("GAITLAB_SEED").env_remove("GAITLAB_GRADCHECK_CORRUPT");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn gen(dir: &Path, subjects: u32, seqs: u32, frames: usize, seed: u64) {
    let out = gaitlab(
        &[
            "gen-data",
            "--out",
            dir.to_str().unwrap(),
            "--subjects",
            &subjects.to_string(),
            "--seqs",
            &seqs.to_string(),
            "--frames",
            &frames.to_string(),
            "--seed",
            &seed.to_string(),
        ],
        &[],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gen_data_layout_and_determinism() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen(a.path(), 8, 4, 12, 5);
    let index = DatasetIndex::load(a.path()).unwrap();
    let entries: usize = index.subjects.iter().map(|s| s.sequences.len()).sum();
    assert_eq!(entries, 32);
    let files = tree(a.path());
    let seq_dirs: std::collections::BTreeSet<_> = files
        .keys()
        .filter(|p| p.extension().is_some_and(|e| e == "xyz"))
        .map(|p| p.parent().unwrap().to_path_buf())
        .collect();
    assert_eq!(seq_dirs.len(), 32);
    let env_seeded = gaitlab(
        &["gen-data", "--out", b.path().to_str().unwrap(), "--subjects", "8", "--seqs", "4", "--frames", "12"],
        &[("GAITLAB_SEED", "5")],
    );
    assert_eq!(code(&env_seeded), 0);
    assert!(files == tree(b.path()), "trees differ");
}

#[test]
fn gen_data_rejects_zero_subjects() {
    let dir = tempfile::tempdir().unwrap();
    let out = gaitlab(
        &["gen-data", "--out", dir.path().to_str().unwrap(), "--subjects", "0", "--seqs", "2", "--frames", "4"],
        &[],
    );
    assert_eq!(code(&out), 2);
    assert_eq!(code(&gaitlab(&["gen-data", "--subjects", "2"], &[])), 2);
    assert_eq!(code(&gaitlab(&["bogus"], &[])), 2);
}

const SMALL_RUN: &str = r#"
[train]
batch_subjects = 2
seqs_per_subject = 2
frames = 4
total_iterations = 50
milestones = [20, 40]
seed = 1

[model]
width = "tiny"

[data]
train_subjects = [0, 1]
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn train(config: &Path, data: &Path, out: &Path) -> Output {
    gaitlab(
        &[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    )
}

#[test]
fn train_writes_checkpoints_and_log() {
    let work = tempfile::tempdir().unwrap();
    let data = work.path().join("data");
    gen(&data, 2, 3, 6, 2);
    let cfg = write_config(work.path(), SMALL_RUN);
    let out_dir = work.path().join("run");
    let out = train(&cfg, &data, &out_dir);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).starts_with("iteration=50 "));
    assert!(out_dir.join(checkpoint_name(50)).is_file());
    let log = fs::read_to_string(out_dir.join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 5);

    // resuming from the milestone checkpoint reproduces the final weights
    let resumed = work.path().join("resumed");
    fs::create_dir_all(&resumed).unwrap();
    fs::copy(out_dir.join(checkpoint_name(40)), resumed.join(checkpoint_name(40))).unwrap();
    fs::write(resumed.join("latest"), checkpoint_name(40)).unwrap();
    assert_eq!(code(&train(&cfg, &data, &resumed)), 0);
    let log = fs::read_to_string(resumed.join("train.log")).unwrap();
    assert_eq!(log.lines().map(|l| l.split(' ').next().unwrap()).collect::<Vec<_>>(), ["iteration=50"]);
    assert_eq!(
        fs::read(out_dir.join(checkpoint_name(50))).unwrap(),
        fs::read(resumed.join(checkpoint_name(50))).unwrap()
    );

    // the trained checkpoint evaluates and reports every sweep entry
    let report = work.path().join("report.json");
    let ev = gaitlab(
        &[
            "eval",
            "--ckpt",
            out_dir.join(checkpoint_name(50)).to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--report",
            report.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code(&ev), 0, "{}", String::from_utf8_lossy(&ev.stderr));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["frames_sweep"].as_array().unwrap().len(), 6);
}

#[test]
fn train_validation_errors_exit_2() {
    let work = tempfile::tempdir().unwrap();
    let cfg = write_config(work.path(), SMALL_RUN);
    let missing = work.path().join("nowhere");
    assert_eq!(code(&train(&cfg, &missing, &work.path().join("out"))), 2);
    let data = work.path().join("data");
    gen(&data, 2, 2, 4, 2);
    let bad = write_config(work.path(), "[train]\nlr = -1.0\n");
    assert_eq!(code(&train(&bad, &data, &work.path().join("out"))), 2);
}

fn eval_stub(kind: &str, data: &Path, report: &Path, extra: &[&str]) -> Output {
    let ckpt = report.with_extension("bin");
    stub_checkpoint(kind, 64).save(&ckpt).unwrap();
    let mut args = vec![
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    gaitlab(&args, &[])
}

#[test]
fn eval_with_stub_models() {
    let work = tempfile::tempdir().unwrap();
    let data = work.path().join("data");
    gen(&data, 6, 3, 4, 8);
    let report = work.path().join("oracle.json");
    let out = eval_stub(ORACLE_KIND, &data, &report, &["--seed", "3"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout(&out).trim(), "rank1=100.00 rank5=100.00 map=100.00");
    let first = fs::read(&report).unwrap();
    let csv = fs::read(report.with_extension("csv")).unwrap();
    assert_eq!(code(&eval_stub(ORACLE_KIND, &data, &report, &["--seed", "3"])), 0);
    assert_eq!(fs::read(&report).unwrap(), first);
    assert_eq!(fs::read(report.with_extension("csv")).unwrap(), csv);
    assert_eq!(code(&eval_stub(ORACLE_KIND, &data, &report, &[])), 0);
    let env = gaitlab(
        &["eval", "--ckpt", report.with_extension("bin").to_str().unwrap(), "--data", data.to_str().unwrap()],
        &[("GAITLAB_SEED", "3")],
    );
    assert_eq!(code(&env), 0);

    let constant = eval_stub(CONSTANT_KIND, &data, &work.path().join("const.json"), &["--frames", "5"]);
    assert_eq!(code(&constant), 0);
    assert!(!stdout(&constant).contains("rank1=100.00"));

    assert_eq!(code(&eval_stub(ORACLE_KIND, &data, &report, &["--subset", "sideways"])), 2);
    assert_eq!(code(&eval_stub(ORACLE_KIND, &data, &report, &["--frames", "0"])), 2);
}

#[test]
fn eval_marks_missing_night_subset_absent() {
    let work = tempfile::tempdir().unwrap();
    let data = work.path().join("data");
    gen(&data, 4, 3, 4, 8);
    let mut index = DatasetIndex::load(&data).unwrap();
    for s in &mut index.subjects {
        for q in &mut s.sequences {
            q.night = false;
        }
    }
    index.save().unwrap();
    let report = work.path().join("night.json");
    let out = eval_stub(ORACLE_KIND, &data, &report, &["--subset", "night"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(json["subsets"]["night"].is_null());
}

#[test]
fn gradcheck_exit_codes() {
    let ok = gaitlab(&["gradcheck"], &[]);
    assert_eq!(code(&ok), 0, "{}", stdout(&ok));
    assert!(stdout(&ok).lines().any(|l| l.starts_with("range.stem ")));
    assert_eq!(code(&gaitlab(&["gradcheck", "--seed", "7"], &[])), 0);
    let bad = gaitlab(&["gradcheck"], &[("GAITLAB_GRADCHECK_CORRUPT", "head.fc")]);
    assert_eq!(code(&bad), 1);
}
