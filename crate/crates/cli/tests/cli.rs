use std::path::Path;
use std::process::{Command, Output};

use raa_core::pgm::parse_pgm;

const SMALL: [&str; 16] = [
    "--set", "data.n=12",
    "--set", "data.size=32",
    "--set", "backbone.channels=4,6",
    "--set", "backbone.strides=2,2",
    "--set", "raa.d_proj=4",
    "--set", "train.epochs=2",
    "--set", "train.folds=2",
    "--set", "train.batch_size=4",
];

fn raa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_raa")).args(args).output().unwrap()
}

fn run(args: &[&str], out: &Path, extra: &[&str]) -> Output {
    let mut all: Vec<&str> = args.to_vec();
    all.extend(["--out", out.to_str().unwrap()]);
    all.extend(extra);
    raa(&all)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_eval_attnmap() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = run(&["train"], &out, &SMALL);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["metrics.csv", "throughput.csv", "embedding.csv", "config.txt", "fold0.rts1", "fold1.rts1"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let ckpt = out.join("fold0.rts1");
    let cfg = out.join("config.txt");
    let o = raa(&["eval", "--config", cfg.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("accuracy="));

    let o = raa(&["eval", "--config", cfg.to_str().unwrap(), "--set", "raa.window=5", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("checkpoint/config mismatch"));

    let maps = dir.path().join("maps");
    let o = run(
        &["attnmap", "--config", cfg.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(), "--index", "1"],
        &maps,
        &[],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let pgm = parse_pgm(&std::fs::read(maps.join("attnmap.pgm")).unwrap()).unwrap();
    assert_eq!((pgm.width, pgm.height), (8, 8));
}

#[test]
fn datagen_file_and_directory_targets() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("a/set.rts1");
    let o = raa(&["datagen", "--n", "6", "--size", "32", "--seed", "3", "--out", file.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let samples = raa_core::data::load_dataset(&file).unwrap();
    assert_eq!(samples.len(), 6);
    assert_eq!(samples[0].image.shape(), &[32, 32, 3]);
    let o = run(&["datagen", "--n", "6", "--size", "32", "--seed", "3"], &dir.path().join("b"), &[]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read(&file).unwrap(), std::fs::read(dir.path().join("b/dataset.rts1")).unwrap());
}

#[test]
fn usage_and_io_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.rts1");
    let o = raa(&["eval", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing.rts1"));
    assert_eq!(raa(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["train", "--set", "raa.windw=3"], dir.path(), &[]).status.code(), Some(2));
    assert_eq!(run(&["train", "--config", "/nonexistent.cfg"], dir.path(), &[]).status.code(), Some(2));
    assert_eq!(raa(&["--help"]).status.code(), Some(0));
}

#[test]
fn small_bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["bench", "--sizes", "4,8", "--windows", "3", "--repeats", "1"], dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
}

#[test]
fn shipped_configs_parse() {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(configs).unwrap() {
        let path = entry.unwrap().path();
        raa_core::config::ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert!(n >= 7);
}
