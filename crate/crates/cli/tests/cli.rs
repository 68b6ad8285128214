use std::fs;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn tano(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tano"))
        .args(args)
        .env("RUST_LOG", "warn")
        .stdin(Stdio::null())
        .output()
        .expect("spawn tano")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn gen(dir: &Path, seed: &str) -> Output {
    tano(&[
        "gen-data",
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        seed,
        "--per-class",
        "6",
    ])
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = walk(dir)
        .into_iter()
        .map(|p| {
            (
                p.strip_prefix(dir).unwrap().display().to_string(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    fs::read_dir(dir)
        .unwrap()
        .flat_map(|e| {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p)
            } else {
                vec![p]
            }
        })
        .collect()
}

#[test]
fn missing_seed_is_rejected_without_a_terminal() {
    let dir = tempfile::tempdir().unwrap();
    let out = tano(&["gen-data", "--out", dir.path().join("d").to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"));
}

#[test]
fn unknown_flags_and_bad_values_are_validation_errors() {
    assert_eq!(code(&tano(&["gen-data", "--bogus"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    let out = tano(&[
        "gen-data",
        "--out",
        d.to_str().unwrap(),
        "--seed",
        "1",
        "--classes",
        "3",
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn generated_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
    );
    for (d, seed) in [(&a, "4"), (&b, "4"), (&c, "5")] {
        let out = gen(d, seed);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    assert_eq!(files(&a), files(&b));
    assert_ne!(files(&a), files(&c));
}

#[test]
fn corrupt_inputs_exit_with_format_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(gen(&data, "2").status.success());
    let blob = walk(&data)
        .into_iter()
        .find(|p| p.extension().is_some_and(|e| e == "tano"))
        .unwrap();
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() / 2]).unwrap();

    let ckpt = dir.path().join("ckpt");
    let args = [
        "pretrain",
        "--data",
        data.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--seed",
        "1",
    ];
    let out = tano(&args);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));

    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    fs::write(&blob, &bad).unwrap();
    assert_eq!(code(&tano(&args)), 4);

    let missing = dir.path().join("nowhere");
    let out = tano(&[
        "eval",
        "--ckpt",
        missing.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--seed",
        "1",
    ]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}
